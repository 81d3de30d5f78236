use std::collections::HashMap;

use rand::Rng;

use super::{BranchTag, HeadKind, Modality, ModelConfig, LEVELS};
use crate::error::{Error, Result};
use crate::rng::{hash_str, rng_from};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a parameter is initialized, and whether it is learned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamKind {
    /// Uniform in `±1/sqrt(fan_in)`.
    Weight { fan_in: usize },
    Bias { fan_in: usize },
    Constant(f64),
    /// Normalization running mean (not learned).
    RunningMean,
    /// Normalization running variance (not learned).
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub tag: BranchTag,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tag: BranchTag,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

impl<T> ParamEntry<T> {
    pub fn trainable(&self) -> bool {
        self.kind.trainable()
    }
}

/// Objectness bias at initialization: logit of a 1% prior.
pub const OBJ_PRIOR_LOGIT: f64 = -4.595_119_850_134_59;

struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    fn push(&mut self, tag: BranchTag, name: String, shape: Vec<usize>, kind: ParamKind) {
        self.specs.push(ParamSpec { name, tag, shape, kind });
    }

    fn conv(&mut self, tag: BranchTag, name: &str, cout: usize, cin: usize, k: usize, bias: bool) {
        let fan_in = cin * k * k;
        self.push(tag, format!("{name}.weight"), vec![cout, cin, k, k], ParamKind::Weight { fan_in });
        if bias {
            self.push(tag, format!("{name}.bias"), vec![cout], ParamKind::Bias { fan_in });
        }
    }

    fn norm(&mut self, tag: BranchTag, name: &str, c: usize) {
        self.push(tag, format!("{name}.weight"), vec![c], ParamKind::Constant(1.0));
        self.push(tag, format!("{name}.bias"), vec![c], ParamKind::Constant(0.0));
        self.push(tag, format!("{name}.running_mean"), vec![c], ParamKind::RunningMean);
        self.push(tag, format!("{name}.running_var"), vec![c], ParamKind::RunningVar);
    }

    fn linear(&mut self, tag: BranchTag, name: &str, dout: usize, din: usize) {
        self.push(tag, format!("{name}.weight"), vec![dout, din], ParamKind::Weight { fan_in: din });
        self.push(tag, format!("{name}.bias"), vec![dout], ParamKind::Bias { fan_in: din });
    }

    fn conv_norm(&mut self, tag: BranchTag, name: &str, cout: usize, cin: usize) {
        self.conv(tag, &format!("{name}.conv"), cout, cin, 3, false);
        self.norm(tag, &format!("{name}.bn"), cout);
    }
}

/// Every parameter of the model described by `cfg`, in canonical order.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut l = Layout { specs: Vec::new() };
    for m in [Modality::Rgb, Modality::Tir] {
        let tag = m.tag();
        let s = cfg.stem_channels;
        l.conv_norm(tag, &format!("{tag}.stem.0"), s, 3);
        l.conv_norm(tag, &format!("{tag}.stem.1"), s, s);
        let mut cin = s;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let stage = format!("{tag}.stage{}", i + 1);
            l.conv_norm(tag, &format!("{stage}.down"), c, cin);
            for b in 0..cfg.blocks_per_stage {
                l.conv_norm(tag, &format!("{stage}.block{b}.0"), c, c);
                l.conv_norm(tag, &format!("{stage}.block{b}.1"), c, c);
            }
            cin = c;
        }
    }
    let tag = BranchTag::Fusion;
    for (i, &c) in cfg.channels.iter().enumerate() {
        let d = cfg.fusion_width(i);
        let base = format!("{tag}.{}", LEVELS[i]);
        l.linear(tag, &format!("{base}.proj_rgb"), d, c);
        l.linear(tag, &format!("{base}.proj_tir"), d, c);
        for dir in ["attn_rgb", "attn_tir"] {
            for p in ["q", "k", "v", "o"] {
                l.linear(tag, &format!("{base}.{dir}.{p}"), d, d);
            }
        }
        l.linear(tag, &format!("{base}.out"), c, 2 * d);
    }
    for (i, &c) in cfg.channels.iter().enumerate() {
        l.conv(BranchTag::Neck, &format!("neck.{}.conv", LEVELS[i]), c, c, 3, false);
    }
    let np = cfg.pred_channels();
    for head in HeadKind::ALL {
        let tag = head.tag();
        for (i, &c) in cfg.channels.iter().enumerate() {
            let base = format!("{}.{}", head.prefix(), LEVELS[i]);
            l.conv(tag, &format!("{base}.conv1"), c, c, 3, false);
            l.conv(tag, &format!("{base}.conv2"), c, c, 3, false);
            l.push(tag, format!("{base}.pred.weight"), vec![np, c, 1, 1], ParamKind::Weight { fan_in: c });
            l.push(tag, format!("{base}.pred.bias"), vec![np], ParamKind::Bias { fan_in: c });
        }
    }
    l.specs
}

/// All arrays of backbone, fusion, neck, and heads, addressable by name and branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ModelParams<T> {
    /// Fan-in scaled uniform initialization, deterministic per `(seed, name)`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let np = cfg.pred_channels();
        let entries = layout(cfg)
            .into_iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let mut rng = rng_from(&[seed, hash_str(&spec.name)]);
                let data: Vec<T> = match spec.kind {
                    ParamKind::Weight { fan_in } | ParamKind::Bias { fan_in } => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect()
                    }
                    ParamKind::Constant(v) => vec![T::lit(v); n],
                    ParamKind::RunningMean => vec![T::zero(); n],
                    ParamKind::RunningVar => vec![T::one(); n],
                };
                let mut value = Tensor::from_vec(&spec.shape, data).unwrap();
                if spec.name.ends_with(".pred.bias") {
                    debug_assert_eq!(value.numel(), np);
                    value.data_mut()[4] = T::lit(OBJ_PRIOR_LOGIT);
                }
                ParamEntry { name: spec.name, tag: spec.tag, kind: spec.kind, value }
            })
            .collect();
        Ok(Self::from_entries(cfg.clone(), entries))
    }

    pub(crate) fn from_entries(config: ModelConfig, entries: Vec<ParamEntry<T>>) -> Self {
        let index = entries.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
        Self { config, entries, index }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index_of(name)
            .map(|i| &self.entries[i].value)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index_of(name) {
            Some(i) => Ok(&mut self.entries[i].value),
            None => Err(Error::InvalidArgument(format!("no parameter named `{name}`"))),
        }
    }

    pub fn has_tag(&self, tag: BranchTag) -> bool {
        self.entries.iter().any(|e| e.tag == tag)
    }

    pub fn has_aux(&self) -> bool {
        self.entries.iter().any(|e| e.tag.is_aux())
    }

    pub fn by_tag(&self, tag: BranchTag) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter().filter(move |e| e.tag == tag)
    }

    /// Number of learnable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable()).map(|e| e.value.numel()).sum()
    }

    /// Drops the auxiliary heads. Idempotent.
    pub fn strip_aux(&self) -> Self {
        let entries = self.entries.iter().filter(|e| !e.tag.is_aux()).cloned().collect();
        Self::from_entries(self.config.clone(), entries)
    }

    /// Sets every trainable array of `tag` to zero.
    pub fn zero_tag(&mut self, tag: BranchTag) {
        for e in self.entries.iter_mut().filter(|e| e.tag == tag && e.trainable()) {
            e.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let entries = self
            .entries
            .iter()
            .map(|e| ParamEntry { name: e.name.clone(), tag: e.tag, kind: e.kind, value: e.value.cast() })
            .collect();
        ModelParams::from_entries(self.config.clone(), entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn toy() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn same_seed_same_params() {
        let a = ModelParams::<f32>::init(&toy(), 5).unwrap();
        let b = ModelParams::<f32>::init(&toy(), 5).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::<f32>::init(&toy(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tags_partition_the_parameters() {
        let p = ModelParams::<f32>::init(&toy(), 0).unwrap();
        let names: HashSet<_> = p.entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names.len(), p.entries().len(), "names unique");
        let mut covered = 0;
        for tag in BranchTag::ALL {
            let n = p.by_tag(tag).count();
            assert!(n > 0, "{tag} empty");
            assert!(p.by_tag(tag).all(|e| e.name.starts_with(tag.as_str())));
            covered += n;
        }
        assert_eq!(covered, p.entries().len());
    }

    #[test]
    fn toy_parameter_count_matches_hand_sum() {
        // default config: stem 16, channels (32, 64, 128), 2 blocks/stage, 3 classes
        let conv = |co: usize, ci: usize| co * ci * 9;
        let bn = |c: usize| 2 * c;
        let mut backbone = conv(16, 3) + bn(16) + conv(16, 16) + bn(16);
        let mut cin = 16;
        for c in [32, 64, 128] {
            backbone += conv(c, cin) + bn(c) + 4 * (conv(c, c) + bn(c));
            cin = c;
        }
        let lin = |o: usize, i: usize| o * i + o;
        let fusion: usize = [32, 64, 128].iter().map(|&c| 2 * lin(c, c) + 8 * lin(c, c) + lin(c, 2 * c)).sum();
        let neck: usize = [32, 64, 128].iter().map(|&c| conv(c, c)).sum();
        let head: usize = [32, 64, 128].iter().map(|&c| 2 * conv(c, c) + 8 * c + 8).sum();
        let expected = 2 * backbone + fusion + neck + 4 * head;
        let p = ModelParams::<f32>::init(&toy(), 0).unwrap();
        assert_eq!(p.num_trainable(), expected);
        assert_eq!(expected, 3_761_504);
    }

    #[test]
    fn strip_aux_is_idempotent() {
        let p = ModelParams::<f32>::init(&toy(), 0).unwrap();
        let s = p.strip_aux();
        assert!(!s.has_aux() && p.has_aux());
        assert_eq!(s.strip_aux(), s);
    }
}
