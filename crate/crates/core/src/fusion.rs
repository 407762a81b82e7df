//! Compact block, part-wise fusion head and the assembled two-modality model.

use crate::autodiff::Var;
use crate::error::{dim_err, Error, Result};
use crate::msgg::{Msgg, MsggConfig, MsggOutput};
use crate::params::{BatchNormParams, LinearParams, ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::silhouette::{SilConfig, SilhouetteEncoder};
use crate::tensor::Tensor;

pub const MSGG_PREFIX: &str = "msgg";
pub const SIL_PREFIX: &str = "sil";
pub const COMPACT_PREFIX: &str = "compact";
pub const FUSION_PREFIX: &str = "fusion";

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub compact_dim: usize,
    pub dropout: f64,
    pub fused_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { compact_dim: 32, dropout: 0.3, fused_dim: 128 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.compact_dim == 0 || self.fused_dim == 0 {
            return Err(Error::Config("fusion dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Batch norm → dropout → linear reduction of the skeleton embedding.
pub struct CompactBlock {
    pub bn: BatchNormParams,
    pub fc: LinearParams,
    pub dropout: f64,
}

impl CompactBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, dropout: f64, rng: &mut Rng) -> Self {
        Self {
            bn: BatchNormParams::new(store, &format!("{prefix}.bn"), din),
            fc: LinearParams::new(store, &format!("{prefix}.fc"), din, dout, rng),
            dropout,
        }
    }

    pub fn forward(&self, s: &mut Session, e: Var) -> Result<Var> {
        let h = s.batch_norm(e, &self.bn)?;
        let mode = s.mode;
        let h = s.tape.dropout(h, self.dropout, mode, &mut s.rng)?;
        s.linear(h, &self.fc)
    }
}

/// `N` unshared linear maps over `[s^n ; k]`.
pub struct FusionHead {
    pub w: ParamId,
    pub b: ParamId,
    pub parts: usize,
}

impl FusionHead {
    pub fn new(store: &mut ParamStore, prefix: &str, parts: usize, din: usize, dout: usize, rng: &mut Rng) -> Self {
        let w = store.add_uniform(&format!("{prefix}.w"), &[parts, din, dout], din, rng);
        let b = store.add_uniform(&format!("{prefix}.b"), &[parts, dout], din, rng);
        Self { w, b, parts }
    }

    /// `parts [B×N×d_s]`, `k [B×d_k]` → `[B×N×d_out]`.
    pub fn forward(&self, s: &mut Session, parts: Var, k: Var) -> Result<Var> {
        let (sp, sk) = (s.tape.shape(parts).to_vec(), s.tape.shape(k).to_vec());
        if sp.len() != 3 || sk.len() != 2 || sp[0] != sk[0] || sp[1] != self.parts {
            return Err(dim_err!("fusion of parts {:?} with compact features {:?}", sp, sk));
        }
        let kb = s.tape.broadcast(k, 1, self.parts)?;
        let x = s.tape.concat(parts, kb)?;
        let w = s.param(self.w);
        let b = s.param(self.b);
        let y = s.tape.part_linear(x, w)?;
        s.tape.add(y, b)
    }
}

pub struct BiFusionOutput {
    pub fused: Var,
    pub parts: Var,
    pub compact: Var,
    pub msgg: MsggOutput,
}

/// Skeleton network, silhouette encoder, compact block and fusion head.
pub struct BiFusion {
    pub msgg: Msgg,
    pub sil: SilhouetteEncoder,
    pub compact: CompactBlock,
    pub head: FusionHead,
    pub fusion: FusionConfig,
}

impl BiFusion {
    pub fn new(
        msgg: MsggConfig,
        sil: SilConfig,
        fusion: FusionConfig,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        fusion.validate()?;
        let msgg = Msgg::new(msgg, store, MSGG_PREFIX, rng)?;
        let sil = SilhouetteEncoder::new(sil, store, SIL_PREFIX, rng)?;
        let c3 = msgg.config.embedding_dim();
        let compact = CompactBlock::new(store, COMPACT_PREFIX, c3, fusion.compact_dim, fusion.dropout, rng);
        let parts = sil.config.parts;
        let din = sil.config.part_dim() + fusion.compact_dim;
        let head = FusionHead::new(store, FUSION_PREFIX, parts, din, fusion.fused_dim, rng);
        Ok(Self { msgg, sil, compact, head, fusion })
    }

    /// `kp [B×T×12×3]`, `sil [B×T'×64×64]`.
    pub fn forward(&self, s: &mut Session, kp: Var, sil: Var) -> Result<BiFusionOutput> {
        let msgg = self.msgg.forward(s, kp)?;
        let e_body = *msgg.embeddings.last().expect("branch embedding");
        let compact = self.compact.forward(s, e_body)?;
        let parts = self.sil.forward(s, sil)?;
        let fused = self.head.forward(s, parts, compact)?;
        Ok(BiFusionOutput { fused, parts, compact, msgg })
    }

    /// Compact embedding alone, `[B×d_k]`.
    pub fn compact_embedding(&self, s: &mut Session, kp: Var) -> Result<Var> {
        let msgg = self.msgg.forward(s, kp)?;
        let e_body = *msgg.embeddings.last().expect("branch embedding");
        self.compact.forward(s, e_body)
    }

    /// Learning-rate group of a parameter: 0 for the pretrained skeleton and
    /// silhouette backbones, 1 for the fusion, compact block and classifier head.
    pub fn group_of(&self, store: &ParamStore, id: ParamId) -> usize {
        param_group(&store.entry(id).name, &self.msgg.head_prefix())
    }
}

pub fn param_group(name: &str, msgg_head_prefix: &str) -> usize {
    let pretrained = (name.starts_with(&format!("{MSGG_PREFIX}.")) && !name.starts_with(msgg_head_prefix))
        || name.starts_with(&format!("{SIL_PREFIX}."));
    if pretrained {
        0
    } else {
        1
    }
}

/// Dense `[N×din×dout]` fusion weights selecting the first `dout` inputs.
pub fn identity_fusion_weights(parts: usize, din: usize, dout: usize) -> Tensor {
    let mut w = vec![0.0; parts * din * dout];
    for p in 0..parts {
        for i in 0..dout.min(din) {
            w[p * din * dout + i * dout + i] = 1.0;
        }
    }
    Tensor::new(&[parts, din, dout], w).expect("fusion weight shape")
}
