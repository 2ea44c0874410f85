use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::EncoderConfig;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{MpcError, Result};
use crate::seed::substream;

/// Indices of one encoder block's tensors.
#[derive(Clone, Debug)]
pub struct LayerIds {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
}

/// Dense d→d + GELU + layer norm.
#[derive(Clone, Debug)]
pub struct TransformIds {
    pub w: usize,
    pub b: usize,
    pub ln_g: usize,
    pub ln_b: usize,
}

/// A scalar classifier on top of a transform.
#[derive(Clone, Debug)]
pub struct ClassifierIds {
    pub transform: TransformIds,
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Debug)]
pub struct ParamIds {
    pub tok: usize,
    pub pos: usize,
    pub seg: usize,
    pub spk: usize,
    pub emb_ln_g: usize,
    pub emb_ln_b: usize,
    pub layers: Vec<LayerIds>,
    pub rur: TransformIds,
    pub a_rur: usize,
    pub iss: TransformIds,
    pub a_iss: usize,
    pub pcd: TransformIds,
    pub w_pcd: usize,
    pub b_pcd: usize,
    pub a_pcd: usize,
    pub msur: TransformIds,
    pub b_msur: usize,
    pub mlm: TransformIds,
    pub b_mlm: usize,
    pub snd: ClassifierIds,
    pub nsp: ClassifierIds,
    pub rs: ClassifierIds,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder<'r, R: Rng> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    std: f64,
    rng: &'r mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let t = match init {
            Init::Normal => Tensor::randn(shape, self.std, self.rng),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::filled(shape, 1.0),
        };
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn transform(&mut self, prefix: &str, d: usize) -> TransformIds {
        TransformIds {
            w: self.add(format!("{prefix}.w"), &[d, d], Init::Normal),
            b: self.add(format!("{prefix}.b"), &[d], Init::Zeros),
            ln_g: self.add(format!("{prefix}.ln.g"), &[d], Init::Ones),
            ln_b: self.add(format!("{prefix}.ln.b"), &[d], Init::Zeros),
        }
    }

    fn classifier(&mut self, prefix: &str, d: usize) -> ClassifierIds {
        ClassifierIds {
            transform: self.transform(&format!("{prefix}.transform"), d),
            w: self.add(format!("{prefix}.cls.w"), &[d, 1], Init::Normal),
            b: self.add(format!("{prefix}.cls.b"), &[1], Init::Zeros),
        }
    }
}

fn build<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> (Vec<String>, Vec<Tensor>, ParamIds) {
    let d = cfg.d;
    let mut b = Builder {
        names: Vec::new(),
        tensors: Vec::new(),
        std: cfg.init_std,
        rng,
    };
    let tok = b.add("emb.token".into(), &[cfg.vocab_size, d], Init::Normal);
    let pos = b.add("emb.position".into(), &[cfg.max_seq_len, d], Init::Normal);
    let seg = b.add("emb.segment".into(), &[2, d], Init::Normal);
    let spk = b.add("emb.interlocutor".into(), &[cfg.speaker_rows(), d], Init::Normal);
    let emb_ln_g = b.add("emb.ln.g".into(), &[d], Init::Ones);
    let emb_ln_b = b.add("emb.ln.b".into(), &[d], Init::Zeros);
    let layers = (0..cfg.layers)
        .map(|l| {
            let p = |s: &str| format!("layer{l}.{s}");
            LayerIds {
                wq: b.add(p("attn.wq"), &[d, d], Init::Normal),
                bq: b.add(p("attn.bq"), &[d], Init::Zeros),
                wk: b.add(p("attn.wk"), &[d, d], Init::Normal),
                bk: b.add(p("attn.bk"), &[d], Init::Zeros),
                wv: b.add(p("attn.wv"), &[d, d], Init::Normal),
                bv: b.add(p("attn.bv"), &[d], Init::Zeros),
                wo: b.add(p("attn.wo"), &[d, d], Init::Normal),
                bo: b.add(p("attn.bo"), &[d], Init::Zeros),
                ln1_g: b.add(p("ln1.g"), &[d], Init::Ones),
                ln1_b: b.add(p("ln1.b"), &[d], Init::Zeros),
                w1: b.add(p("ffn.w1"), &[d, cfg.d_ff], Init::Normal),
                b1: b.add(p("ffn.b1"), &[cfg.d_ff], Init::Zeros),
                w2: b.add(p("ffn.w2"), &[cfg.d_ff, d], Init::Normal),
                b2: b.add(p("ffn.b2"), &[d], Init::Zeros),
                ln2_g: b.add(p("ln2.g"), &[d], Init::Ones),
                ln2_b: b.add(p("ln2.b"), &[d], Init::Zeros),
            }
        })
        .collect();
    let rur = b.transform("rur.transform", d);
    let a_rur = b.add("rur.a".into(), &[d, d], Init::Normal);
    let iss = b.transform("iss.transform", d);
    let a_iss = b.add("iss.a".into(), &[d, d], Init::Normal);
    let pcd = b.transform("pcd.transform", d);
    let w_pcd = b.add("pcd.w".into(), &[2 * d, d], Init::Normal);
    let b_pcd = b.add("pcd.b".into(), &[d], Init::Zeros);
    let a_pcd = b.add("pcd.a".into(), &[d, d], Init::Normal);
    let msur = b.transform("msur.transform", d);
    let b_msur = b.add("msur.b".into(), &[cfg.vocab_size], Init::Zeros);
    let mlm = b.transform("mlm.transform", d);
    let b_mlm = b.add("mlm.b".into(), &[cfg.vocab_size], Init::Zeros);
    let snd = b.classifier("snd", d);
    let nsp = b.classifier("nsp", d);
    let rs = b.classifier("rs", d);
    let ids = ParamIds {
        tok,
        pos,
        seg,
        spk,
        emb_ln_g,
        emb_ln_b,
        layers,
        rur,
        a_rur,
        iss,
        a_iss,
        pcd,
        w_pcd,
        b_pcd,
        a_pcd,
        msur,
        b_msur,
        mlm,
        b_mlm,
        snd,
        nsp,
        rs,
    };
    (b.names, b.tensors, ids)
}

/// Every learnable tensor, in a fixed order determined by the config.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    ids: ParamIds,
}

/// Name and shape of one tensor, as listed in checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl EncoderParams {
    /// N(0, init_std) weights, zero biases, unit layer-norm gains, drawn from
    /// the "init" substream of `seed`.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "init", &[]);
        let (names, tensors, ids) = build(config, &mut rng);
        Ok(EncoderParams {
            config: config.clone(),
            names,
            tensors,
            ids,
        })
    }

    /// Rebuilds from stored tensors; names and shapes must match the config.
    pub fn from_tensors(config: &EncoderConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut p = EncoderParams::init(config, 0)?;
        if named.len() != p.tensors.len() {
            return Err(MpcError::Checkpoint(format!(
                "{} tensors stored, config needs {}",
                named.len(),
                p.tensors.len()
            )));
        }
        for (k, (name, t)) in named.into_iter().enumerate() {
            if name != p.names[k] || t.shape() != p.tensors[k].shape() {
                return Err(MpcError::Checkpoint(format!(
                    "tensor {k}: found {name} {:?}, expected {} {:?}",
                    t.shape(),
                    p.names[k],
                    p.tensors[k].shape()
                )));
            }
            p.tensors[k] = t;
        }
        Ok(p)
    }

    pub fn ids(&self) -> &ParamIds {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|k| &self.tensors[k])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |k| &mut self.tensors[k])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn infos(&self) -> Vec<TensorInfo> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| TensorInfo {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect()
    }

    /// Puts every tensor on `g` as a gradient-carrying leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
        }
    }
}

/// Graph handles of an [`EncoderParams`] set; same order as its tensors.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl std::ops::Index<usize> for Bound {
    type Output = Var;

    fn index(&self, k: usize) -> &Var {
        &self.vars[k]
    }
}
