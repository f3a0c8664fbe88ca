//! Model architecture description and its on-disk text form.
//!
//! A config file is line-oriented `key=value` text; keys match the struct
//! fields exactly, `#` starts a comment, unknown or duplicate keys are
//! rejected. Omitted keys fall back to the defaults documented on
//! [`ModelConfig::toy`], with `heads` and `depths` derived from the final
//! channel list when not given explicitly.

use crate::nn::default_num_heads;
use crate::{Error, Result};

/// Which attention wiring the decoder uses. `Mix` is the architecture this
/// crate exists for; the other two are ablation baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    /// Keys/values from the pooled concatenation of all stage features.
    Mix,
    /// Keys/values from a single source: the highest-resolution encoder
    /// feature (no propagation), or the previous decoder output when
    /// propagation is on.
    CrossLowest,
    /// Keys/values equal the stage's own query feature.
    SelfAttention,
}

impl AttentionVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionVariant::Mix => "mix",
            AttentionVariant::CrossLowest => "cross-lowest",
            AttentionVariant::SelfAttention => "self",
        }
    }
}

impl std::str::FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<AttentionVariant> {
        match s {
            "mix" => Ok(AttentionVariant::Mix),
            "cross-lowest" => Ok(AttentionVariant::CrossLowest),
            "self" => Ok(AttentionVariant::SelfAttention),
            other => Err(Error::Config(format!(
                "unknown attention_variant '{other}' (expected mix, cross-lowest, or self)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of encoder/decoder stages N.
    pub num_stages: usize,
    pub img_h: usize,
    pub img_w: usize,
    /// Channel width per stage, `channels[j-1]` = C_j.
    pub channels: Vec<usize>,
    /// Segmentation classes K.
    pub num_classes: usize,
    /// Hidden width of the segmentation head MLP.
    pub head_embed_dim: usize,
    /// Attention heads used when stage j serves as the query side.
    pub heads: Vec<usize>,
    /// FFN hidden expansion in decoder stages.
    pub ffn_ratio: usize,
    pub attention_variant: AttentionVariant,
    /// Add the encoder stage-3 midpoint as an extra kv source.
    pub plus_midpoint: bool,
    /// Feed previously computed decoder outputs back into later stages'
    /// key/value sets (the U-shaped propagation). Turning this off is the
    /// "without U-Net" ablation arm.
    pub propagate: bool,
    /// Residual block count per encoder stub stage.
    pub depths: Vec<usize>,
}

impl ModelConfig {
    /// The default desk-scale configuration: four stages over 64x64 inputs,
    /// the smallest ladder with a genuine stage-3 midpoint.
    pub fn toy() -> ModelConfig {
        let channels = default_channels(4);
        ModelConfig {
            num_stages: 4,
            img_h: 64,
            img_w: 64,
            num_classes: 4,
            head_embed_dim: 128,
            heads: channels.iter().map(|&c| default_num_heads(c)).collect(),
            channels,
            ffn_ratio: 4,
            attention_variant: AttentionVariant::Mix,
            plus_midpoint: false,
            propagate: true,
            depths: default_depths(4),
        }
    }

    /// Spatial size of the stage-j feature map (1-based j): H/2^{j+1}.
    pub fn stage_size(&self, stage: usize) -> (usize, usize) {
        (self.img_h >> (stage + 1), self.img_w >> (stage + 1))
    }

    /// Pooling ratio aligning stage j to the coarsest (stage N) resolution.
    pub fn pool_ratio(&self, stage: usize) -> usize {
        1 << (self.num_stages - stage)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_stages;
        if n < 2 {
            return Err(Error::Config(format!(
                "num_stages must be at least 2, got {n}"
            )));
        }
        for (name, list) in
            [("channels", &self.channels), ("heads", &self.heads), ("depths", &self.depths)]
        {
            if list.len() != n {
                return Err(Error::Config(format!(
                    "{name} has {} entries for {n} stages",
                    list.len()
                )));
            }
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("channels must all be positive".to_string()));
        }
        let div = 1usize << (n + 1);
        if self.img_h == 0 || self.img_w == 0 || self.img_h % div != 0 || self.img_w % div != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be divisible by 2^(N+1) = {div}",
                self.img_h, self.img_w
            )));
        }
        for (j, (&c, &h)) in self.channels.iter().zip(&self.heads).enumerate() {
            if h == 0 || c % h != 0 {
                return Err(Error::Config(format!(
                    "heads[{j}] = {h} must divide channels[{j}] = {c}"
                )));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.head_embed_dim == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config(
                "head_embed_dim and ffn_ratio must be positive".to_string(),
            ));
        }
        if self.plus_midpoint {
            if self.attention_variant != AttentionVariant::Mix {
                return Err(Error::Config(
                    "plus_midpoint requires the mix attention variant".to_string(),
                ));
            }
            if n < 3 {
                return Err(Error::Config(
                    "plus_midpoint requires at least 3 stages (the midpoint lives in stage 3)"
                        .to_string(),
                ));
            }
        }
        Ok(())
    }

    /// Parse the `key=value` text form. Unknown keys, duplicate keys and
    /// malformed values are configuration errors; missing keys default.
    pub fn parse(text: &str) -> Result<ModelConfig> {
        let mut seen: Vec<&str> = Vec::new();
        let mut num_stages = None;
        let mut img_h = None;
        let mut img_w = None;
        let mut channels: Option<Vec<usize>> = None;
        let mut num_classes = None;
        let mut head_embed_dim = None;
        let mut heads: Option<Vec<usize>> = None;
        let mut ffn_ratio = None;
        let mut attention_variant = None;
        let mut plus_midpoint = None;
        let mut propagate = None;
        let mut depths: Option<Vec<usize>> = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            seen.push(key);
            match key {
                "num_stages" => num_stages = Some(parse_usize(key, value)?),
                "img_h" => img_h = Some(parse_usize(key, value)?),
                "img_w" => img_w = Some(parse_usize(key, value)?),
                "channels" => channels = Some(parse_usize_list(key, value)?),
                "num_classes" => num_classes = Some(parse_usize(key, value)?),
                "head_embed_dim" => head_embed_dim = Some(parse_usize(key, value)?),
                "heads" => heads = Some(parse_usize_list(key, value)?),
                "ffn_ratio" => ffn_ratio = Some(parse_usize(key, value)?),
                "attention_variant" => attention_variant = Some(value.parse()?),
                "plus_midpoint" => plus_midpoint = Some(parse_bool(key, value)?),
                "propagate" => propagate = Some(parse_bool(key, value)?),
                "depths" => depths = Some(parse_usize_list(key, value)?),
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown config key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }

        let toy = ModelConfig::toy();
        let num_stages = num_stages.unwrap_or(toy.num_stages);
        let channels = channels.unwrap_or_else(|| default_channels(num_stages));
        let heads =
            heads.unwrap_or_else(|| channels.iter().map(|&c| default_num_heads(c)).collect());
        let depths = depths.unwrap_or_else(|| default_depths(num_stages));
        let config = ModelConfig {
            num_stages,
            img_h: img_h.unwrap_or(toy.img_h),
            img_w: img_w.unwrap_or(toy.img_w),
            channels,
            num_classes: num_classes.unwrap_or(toy.num_classes),
            head_embed_dim: head_embed_dim.unwrap_or(toy.head_embed_dim),
            heads,
            ffn_ratio: ffn_ratio.unwrap_or(toy.ffn_ratio),
            attention_variant: attention_variant.unwrap_or(toy.attention_variant),
            plus_midpoint: plus_midpoint.unwrap_or(toy.plus_midpoint),
            propagate: propagate.unwrap_or(toy.propagate),
            depths,
        };
        config.validate()?;
        Ok(config)
    }

    /// Canonical text form; `parse` of this round-trips exactly.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        format!(
            "num_stages={}\nimg_h={}\nimg_w={}\nchannels={}\nnum_classes={}\n\
             head_embed_dim={}\nheads={}\nffn_ratio={}\nattention_variant={}\n\
             plus_midpoint={}\npropagate={}\ndepths={}\n",
            self.num_stages,
            self.img_h,
            self.img_w,
            list(&self.channels),
            self.num_classes,
            self.head_embed_dim,
            list(&self.heads),
            self.ffn_ratio,
            self.attention_variant.as_str(),
            self.plus_midpoint,
            self.propagate,
            list(&self.depths),
        )
    }
}

/// Doubling ladder starting at 8: (8, 16, 32, ...).
fn default_channels(n: usize) -> Vec<usize> {
    (0..n).map(|j| 8 << j).collect()
}

/// One block per stage, two in stage 3 (so the midpoint is a real midpoint).
fn default_depths(n: usize) -> Vec<usize> {
    (1..=n).map(|j| if j == 3 { 2 } else { 1 }).collect()
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key '{key}': expected an integer, got '{value}'")))
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|p| parse_usize(key, p.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "key '{key}': expected true or false, got '{value}'"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid_and_has_expected_defaults() {
        let c = ModelConfig::toy();
        c.validate().unwrap();
        assert_eq!(c.channels, vec![8, 16, 32, 64]);
        assert_eq!(c.heads, vec![1, 1, 1, 2]);
        assert_eq!(c.depths, vec![1, 1, 2, 1]);
        assert_eq!(c.stage_size(1), (16, 16));
        assert_eq!(c.stage_size(4), (2, 2));
        assert_eq!(c.pool_ratio(1), 8);
        assert_eq!(c.pool_ratio(4), 1);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut c = ModelConfig::toy();
        c.attention_variant = AttentionVariant::CrossLowest;
        c.plus_midpoint = false;
        c.propagate = false;
        c.img_w = 128;
        let parsed = ModelConfig::parse(&c.to_text()).unwrap();
        assert_eq!(parsed, c);
    }

    #[test]
    fn parse_applies_defaults_and_derives_heads() {
        let c = ModelConfig::parse("num_stages=3\nchannels=8,16,96\nimg_h=32\nimg_w=32\n")
            .unwrap();
        assert_eq!(c.num_stages, 3);
        assert_eq!(c.heads, vec![1, 1, 3], "heads derive from the explicit channels");
        assert_eq!(c.depths, vec![1, 1, 2]);
        assert_eq!(c.num_classes, 4);
    }

    #[test]
    fn parse_rejects_unknown_and_duplicate_keys() {
        let err = ModelConfig::parse("wibble=3\n").unwrap_err();
        assert!(err.to_string().contains("wibble"), "got {err}");
        let err = ModelConfig::parse("img_h=64\nimg_h=32\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "got {err}");
        assert!(ModelConfig::parse("channels=8,x\n").is_err());
        assert!(ModelConfig::parse("plus_midpoint=yes\n").is_err());
        assert!(ModelConfig::parse("attention_variant=banana\n").is_err());
        assert!(ModelConfig::parse("img_h\n").is_err());
    }

    #[test]
    fn parse_allows_comments_and_blank_lines() {
        let c = ModelConfig::parse("# a comment\n\nimg_h=128  # trailing\nimg_w=64\n").unwrap();
        assert_eq!(c.img_h, 128);
        assert_eq!(c.img_w, 64);
    }

    #[test]
    fn validate_rejects_bad_divisibility() {
        let mut c = ModelConfig::toy();
        c.img_h = 48; // not divisible by 32
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn validate_rejects_mismatched_lists() {
        let mut c = ModelConfig::toy();
        c.channels = vec![8, 16, 32];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.heads = vec![1, 1, 1, 3]; // 3 does not divide 64
        assert!(c.validate().is_err());
    }

    #[test]
    fn validate_constrains_plus_midpoint() {
        let mut c = ModelConfig::toy();
        c.plus_midpoint = true;
        c.validate().unwrap();
        c.attention_variant = AttentionVariant::CrossLowest;
        assert!(c.validate().is_err());

        let two_stage = ModelConfig::parse(
            "num_stages=2\nchannels=8,16\nimg_h=32\nimg_w=32\nplus_midpoint=true\n",
        );
        assert!(two_stage.is_err());
    }

    #[test]
    fn validate_requires_two_stages_and_two_classes() {
        assert!(ModelConfig::parse("num_stages=1\nchannels=8\nimg_h=16\nimg_w=16\n").is_err());
        assert!(ModelConfig::parse("num_classes=1\n").is_err());
    }
}
