use serde::{Deserialize, Serialize};

/// Floating-point width used for forward and backward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Shape of the decoder-only policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    /// Number of attention blocks (1 or 2).
    pub depth: usize,
    pub width: usize,
    pub head_count: usize,
    /// Hidden width of each block's feed-forward layer.
    pub mlp_width: usize,
    pub seed: u64,
    /// Token excluded from the output distribution (never sampled).
    pub pad_token: Option<u32>,
    /// Token that terminates sampling.
    pub eos_token: Option<u32>,
    #[serde(default)]
    pub precision: Precision,
}

impl ArchConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: String| crate::error::config::<()>(m);
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if !(1..=2).contains(&self.depth) {
            return bad(format!("depth {} outside 1..=2", self.depth));
        }
        if self.width == 0 || self.head_count == 0 || self.width % self.head_count != 0 {
            return bad(format!(
                "width {} not divisible by head_count {}",
                self.width, self.head_count
            ));
        }
        if self.mlp_width == 0 || self.context_length < 2 {
            return bad("mlp_width and context_length must be positive".into());
        }
        for t in [self.pad_token, self.eos_token].into_iter().flatten() {
            if t as usize >= self.vocab_size {
                return bad(format!("special token {t} outside vocabulary"));
            }
        }
        if self.pad_token.is_some() && self.pad_token == self.eos_token {
            return bad("pad and eos must differ".into());
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.width / self.head_count
    }
}

/// Named tensor slots in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSlots {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Offsets of every tensor plus the manifest used for checkpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub w_out: usize,
    pub b_out: usize,
    pub total: usize,
    pub manifest: Vec<TensorSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Kind governs initialization: weight, bias or gain.
    pub kind: TensorKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Weight,
    Bias,
    Gain,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

impl Layout {
    pub fn new(arch: &ArchConfig) -> Self {
        let (v, c, d, h) = (arch.vocab_size, arch.context_length, arch.width, arch.mlp_width);
        let mut manifest = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, shape: Vec<usize>, kind: TensorKind| {
            let at = offset;
            let spec = TensorSpec { name, shape, kind };
            offset += spec.numel();
            manifest.push(spec);
            at
        };
        use TensorKind::*;
        let tok_emb = push("tok_emb".into(), vec![v, d], Weight);
        let pos_emb = push("pos_emb".into(), vec![c, d], Weight);
        let mut layers = Vec::with_capacity(arch.depth);
        for l in 0..arch.depth {
            let n = |s: &str| format!("block{l}.{s}");
            layers.push(LayerSlots {
                ln1_g: push(n("ln1.gain"), vec![d], Gain),
                ln1_b: push(n("ln1.bias"), vec![d], Bias),
                wq: push(n("attn.wq"), vec![d, d], Weight),
                wk: push(n("attn.wk"), vec![d, d], Weight),
                wv: push(n("attn.wv"), vec![d, d], Weight),
                wo: push(n("attn.wo"), vec![d, d], Weight),
                ln2_g: push(n("ln2.gain"), vec![d], Gain),
                ln2_b: push(n("ln2.bias"), vec![d], Bias),
                w1: push(n("mlp.w1"), vec![d, h], Weight),
                b1: push(n("mlp.b1"), vec![h], Bias),
                w2: push(n("mlp.w2"), vec![h, d], Weight),
                b2: push(n("mlp.b2"), vec![d], Bias),
            });
        }
        let lnf_g = push("lnf.gain".into(), vec![d], Gain);
        let lnf_b = push("lnf.bias".into(), vec![d], Bias);
        let w_out = push("head.w".into(), vec![d, v], Weight);
        let b_out = push("head.b".into(), vec![v], Bias);
        Self { tok_emb, pos_emb, layers, lnf_g, lnf_b, w_out, b_out, total: offset, manifest }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ArchConfig {
        ArchConfig {
            vocab_size: 6,
            context_length: 8,
            depth: 1,
            width: 4,
            head_count: 2,
            mlp_width: 8,
            seed: 0,
            pad_token: Some(5),
            eos_token: Some(4),
            precision: Precision::F64,
        }
    }

    #[test]
    fn manifest_covers_every_parameter() {
        let a = tiny();
        let l = Layout::new(&a);
        let sum: usize = l.manifest.iter().map(TensorSpec::numel).sum();
        assert_eq!(sum, l.total);
        assert_eq!(l.b_out + a.vocab_size, l.total);
    }

    #[test]
    fn head_count_must_divide_width() {
        let a = ArchConfig { head_count: 3, ..tiny() };
        assert!(matches!(a.validate(), Err(crate::Error::Config(_))));
        assert!(ArchConfig { depth: 3, ..tiny() }.validate().is_err());
        tiny().validate().unwrap();
    }
}
