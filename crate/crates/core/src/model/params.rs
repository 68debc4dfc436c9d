//! Named, ordered parameter collections and their initialization.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EncoderKind, ModelConfig};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::WindowPlan;

const TRANSFORMER_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    Attention,
    Bias,
    Norm,
    Encoder,
    Decoder,
    Head,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embedding => "embedding",
            ParamGroup::Attention => "attention",
            ParamGroup::Bias => "bias",
            ParamGroup::Norm => "norm",
            ParamGroup::Encoder => "encoder",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            ParamGroup::Embedding,
            ParamGroup::Attention,
            ParamGroup::Bias,
            ParamGroup::Norm,
            ParamGroup::Encoder,
            ParamGroup::Decoder,
            ParamGroup::Head,
        ]
        .into_iter()
        .find(|g| g.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// He normal for a convolution with this fan-in.
    Kaiming(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Specs(Vec<ParamSpec>);

impl Specs {
    fn add(&mut self, name: String, group: ParamGroup, rows: usize, cols: usize, init: Init) {
        self.0.push(ParamSpec {
            name,
            group,
            rows,
            cols,
            init,
        });
    }

    fn linear(&mut self, prefix: &str, group: ParamGroup, i: usize, o: usize) {
        self.add(
            format!("{prefix}.w"),
            group,
            i,
            o,
            Init::Normal(TRANSFORMER_STD),
        );
        self.add(format!("{prefix}.b"), group, 1, o, Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, dim: usize) {
        self.add(format!("{prefix}.g"), ParamGroup::Norm, 1, dim, Init::Ones);
        self.add(format!("{prefix}.b"), ParamGroup::Norm, 1, dim, Init::Zeros);
    }

    fn conv(&mut self, prefix: &str, group: ParamGroup, cin: usize, cout: usize) {
        self.add(
            format!("{prefix}.w"),
            group,
            cout,
            cin * 27,
            Init::Kaiming(cin * 27),
        );
        self.add(format!("{prefix}.b"), group, 1, cout, Init::Zeros);
    }

    fn block(&mut self, prefix: &str, cfg: &ModelConfig, dim: usize, heads: usize, table: usize) {
        self.norm(&format!("{prefix}.norm1"), dim);
        self.linear(
            &format!("{prefix}.attn.qkv"),
            ParamGroup::Attention,
            dim,
            3 * dim,
        );
        if table > 0 {
            self.add(
                format!("{prefix}.attn.bias_table"),
                ParamGroup::Bias,
                table,
                heads,
                Init::Normal(TRANSFORMER_STD),
            );
        }
        self.linear(
            &format!("{prefix}.attn.proj"),
            ParamGroup::Attention,
            dim,
            dim,
        );
        self.norm(&format!("{prefix}.norm2"), dim);
        let hidden = cfg.mlp_hidden(dim);
        self.linear(
            &format!("{prefix}.mlp.fc1"),
            ParamGroup::Attention,
            dim,
            hidden,
        );
        self.linear(
            &format!("{prefix}.mlp.fc2"),
            ParamGroup::Attention,
            hidden,
            dim,
        );
    }
}

/// The full parameter list of a configuration, in a stable order.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut s = Specs(Vec::new());
    let c = cfg.embed_dim;
    let taps: usize = cfg.patch_size.iter().product();
    s.linear(
        "embed.proj",
        ParamGroup::Embedding,
        cfg.in_channels * taps,
        c,
    );
    s.norm("embed.norm", c);
    let grids = cfg.stage_grids();
    match cfg.encoder_kind {
        EncoderKind::SwinHierarchical => {
            for st in 0..cfg.stages() {
                let dim = cfg.stage_dim(st);
                for b in 0..cfg.depths[st] {
                    let plan = WindowPlan::new(grids[st], cfg.window, b % 2 == 1, true);
                    s.block(
                        &format!("stage{st}.block{b}"),
                        cfg,
                        dim,
                        cfg.heads[st],
                        plan.table_len,
                    );
                }
                if st + 1 < cfg.stages() {
                    s.norm(&format!("merge{st}.norm"), 8 * dim);
                    s.linear(
                        &format!("merge{st}.reduce"),
                        ParamGroup::Attention,
                        8 * dim,
                        2 * dim,
                    );
                }
            }
        }
        EncoderKind::PlainViT => {
            let tokens: usize = grids[0].iter().product();
            s.add(
                "vit.pos".into(),
                ParamGroup::Embedding,
                tokens,
                c,
                Init::Normal(TRANSFORMER_STD),
            );
            let total: usize = cfg.depths.iter().sum();
            for b in 0..total {
                s.block(&format!("vit.block{b}"), cfg, c, cfg.heads[0], 0);
            }
            for st in 0..cfg.stages() {
                s.linear(
                    &format!("vit.proj{st}"),
                    ParamGroup::Encoder,
                    c,
                    cfg.stage_dim(st),
                );
            }
        }
        EncoderKind::ConvPyramid => {
            for st in 0..cfg.stages() {
                let dim = cfg.stage_dim(st);
                if st > 0 {
                    s.conv(
                        &format!("cnn.stage{st}.down"),
                        ParamGroup::Encoder,
                        cfg.stage_dim(st - 1),
                        dim,
                    );
                }
                s.conv(
                    &format!("cnn.stage{st}.conv1"),
                    ParamGroup::Encoder,
                    dim,
                    dim,
                );
                s.conv(
                    &format!("cnn.stage{st}.conv2"),
                    ParamGroup::Encoder,
                    dim,
                    dim,
                );
            }
        }
    }
    let f = cfg.dec_base;
    s.conv("conv.full", ParamGroup::Decoder, cfg.in_channels, f);
    s.conv("conv.half", ParamGroup::Decoder, cfg.in_channels, 2 * f);
    let last = cfg.stages() - 1;
    let mut ch = cfg.stage_dim(last);
    for st in (0..last).rev() {
        let w = cfg.dec_width(st);
        s.conv(
            &format!("dec.stage{st}.conv1"),
            ParamGroup::Decoder,
            ch + cfg.stage_dim(st),
            w,
        );
        s.conv(&format!("dec.stage{st}.conv2"), ParamGroup::Decoder, w, w);
        ch = w;
    }
    s.conv("dec.half.conv1", ParamGroup::Decoder, ch + 2 * f, 2 * f);
    s.conv("dec.half.conv2", ParamGroup::Decoder, 2 * f, 2 * f);
    s.conv("dec.full.conv1", ParamGroup::Decoder, 2 * f + f, f);
    s.conv("dec.full.conv2", ParamGroup::Decoder, f, f);
    s.add(
        "head.w".into(),
        ParamGroup::Head,
        cfg.dvf_channels,
        f * 27,
        Init::Zeros,
    );
    s.add(
        "head.b".into(),
        ParamGroup::Head,
        1,
        cfg.dvf_channels,
        Init::Zeros,
    );
    Ok(s.0)
}

/// Parameter values keyed by stable names.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub specs: Vec<ParamSpec>,
    pub values: Vec<Vec<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Params<T> {
    pub fn from_parts(specs: Vec<ParamSpec>, values: Vec<Vec<T>>) -> Result<Self> {
        if specs.len() != values.len() {
            return Err(Error::Invalid("parameter spec/value count mismatch".into()));
        }
        for (s, v) in specs.iter().zip(&values) {
            if s.len() != v.len() {
                return Err(Error::Shape(format!(
                    "parameter {} has {} values, expected {}",
                    s.name,
                    v.len(),
                    s.len()
                )));
            }
        }
        let index = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        Ok(Params {
            specs,
            values,
            index,
        })
    }

    /// Seeded initialization for `cfg`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let specs = param_specs(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = specs
            .iter()
            .map(|s| {
                let n = s.len();
                match s.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Normal(std) => sample(&mut rng, std, n),
                    Init::Kaiming(fan_in) => sample(&mut rng, (2.0 / fan_in as f64).sqrt(), n),
                }
            })
            .collect();
        Self::from_parts(specs, values)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.id(name).map(|i| self.values[i].as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<T>> {
        self.id(name).map(move |i| &mut self.values[i])
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            specs: self.specs.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|&x| U::c(x.f64())).collect())
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (s, v) in self.specs.iter().zip(&self.values) {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {}", s.name)));
            }
        }
        Ok(())
    }
}

fn sample<T: Real>(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| T::c(dist.sample(rng))).collect()
}
