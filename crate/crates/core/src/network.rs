//! The dual-branch fusion graph: a shared encoder, base and detail branch
//! encoders, the two fusion layers, and one decoder reused by both training
//! stages.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::{BlockConfig, Brb, Conv3x3, CouplingSpec, InnBlock, LiteTransformerBlock, Pointwise, RestormerBlock};
use crate::error::{FuseError, Result};
use crate::ops::{self, dims4};
use crate::params::{ParamStore, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKind {
    Lt,
    Inn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetailKind {
    Inn,
    Lt,
    Cnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub sfe_blocks: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_expansion: f64,
    pub bte_block_kind: BaseKind,
    pub dce_block_kind: DetailKind,
    /// Lite transformer blocks per LT branch (BTE, or DCE under the LT swap).
    pub bte_blocks: usize,
    /// Coupling layers per invertible branch.
    pub inn_layers: usize,
    pub decoder_blocks: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            sfe_blocks: 4,
            embed_dim: 64,
            heads: 8,
            ffn_expansion: 2.0,
            bte_block_kind: BaseKind::Lt,
            dce_block_kind: DetailKind::Inn,
            bte_blocks: 2,
            inn_layers: 2,
            decoder_blocks: 2,
        }
    }
}

impl NetworkSpec {
    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            embed_dim: self.embed_dim,
            num_heads: self.heads,
            num_layers: 1,
            ffn_expansion: self.ffn_expansion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        if !self.embed_dim.is_multiple_of(2) || !(self.embed_dim / 2).is_multiple_of(self.heads) {
            return Err(FuseError::config(format!(
                "embed_dim {} must split into two halves divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.sfe_blocks == 0 || self.decoder_blocks == 0 || self.bte_blocks == 0 || self.inn_layers == 0 {
            return Err(FuseError::config("block counts must be positive"));
        }
        Ok(())
    }

    /// Stable identifier of the architecture, stored in checkpoints.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }

    fn coupling(&self, channels: usize) -> CouplingSpec {
        CouplingSpec::new(channels, self.inn_layers)
    }

    /// Number of BRBs and their hidden width for the CNN detail branch, chosen
    /// so its parameter count tracks the invertible branch it replaces.
    pub fn cnn_chain_dims(&self) -> (usize, usize) {
        let c = self.embed_dim;
        let target = InnBlock::param_count(&self.coupling(c)) as f64;
        let len = (3 * self.inn_layers).div_ceil(2).max(1);
        let per_block = target / len as f64;
        let hidden = ((per_block - c as f64) / (2 * c + 11) as f64).round().max(1.0) as usize;
        (len, hidden)
    }
}

/// Per-modality encoder outputs.
#[derive(Debug, Clone)]
pub struct DecomposedFeatures {
    pub shared: Tensor,
    pub base: Tensor,
    pub detail: Tensor,
}

impl DecomposedFeatures {
    fn split_batch(&self, at: usize) -> Result<(Self, Self)> {
        let part = |t: &Tensor, lo: usize, len: usize| t.narrow(0, lo, len);
        let n = self.shared.dim(0)?;
        Ok((
            Self {
                shared: part(&self.shared, 0, at)?,
                base: part(&self.base, 0, at)?,
                detail: part(&self.detail, 0, at)?,
            },
            Self {
                shared: part(&self.shared, at, n - at)?,
                base: part(&self.base, at, n - at)?,
                detail: part(&self.detail, at, n - at)?,
            },
        ))
    }
}

#[derive(Debug, Clone)]
pub struct FusedFeatures {
    pub base: Tensor,
    pub detail: Tensor,
}

/// Output of a stage-II forward pass.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub fused: Tensor,
    pub dec_a: DecomposedFeatures,
    pub dec_b: DecomposedFeatures,
    pub features: FusedFeatures,
}

/// Output of a stage-I forward pass.
#[derive(Debug, Clone)]
pub struct ReconstructionOutput {
    pub recon_a: Tensor,
    pub recon_b: Tensor,
    pub dec_a: DecomposedFeatures,
    pub dec_b: DecomposedFeatures,
}

#[derive(Debug, Clone)]
pub enum Branch {
    Lt(Vec<LiteTransformerBlock>),
    Inn(InnBlock),
    Cnn(Vec<Brb>),
}

impl Branch {
    fn lt(s: &mut Scope, spec: &NetworkSpec) -> Result<Self> {
        let blocks = (0..spec.bte_blocks)
            .map(|i| LiteTransformerBlock::new(&mut s.sub(format!("lt{i}")), spec.block()))
            .collect::<Result<_>>()?;
        Ok(Branch::Lt(blocks))
    }

    fn inn(s: &mut Scope, spec: &NetworkSpec) -> Result<Self> {
        Ok(Branch::Inn(InnBlock::new(&mut s.sub("inn"), spec.coupling(spec.embed_dim))?))
    }

    fn cnn(s: &mut Scope, spec: &NetworkSpec) -> Result<Self> {
        let (len, hidden) = spec.cnn_chain_dims();
        let c = spec.embed_dim;
        let blocks = (0..len)
            .map(|i| Brb::new(&mut s.sub(format!("brb{i}")), c, c, hidden, true))
            .collect::<Result<_>>()?;
        Ok(Branch::Cnn(blocks))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Branch::Lt(blocks) => blocks.iter().try_fold(x.clone(), |h, b| b.forward(&h)),
            Branch::Inn(inn) => inn.forward(x),
            Branch::Cnn(blocks) => blocks.iter().try_fold(x.clone(), |h, b| b.forward(&h)),
        }
    }

    /// Exact inverse, available for the invertible branch only.
    pub fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        match self {
            Branch::Inn(inn) => inn.inverse(y),
            _ => Err(FuseError::config("only the invertible branch has an inverse")),
        }
    }

    pub fn is_invertible(&self) -> bool {
        matches!(self, Branch::Inn(_))
    }
}

#[derive(Debug, Clone)]
struct BaseFusion {
    mix: LiteTransformerBlock,
    proj: Pointwise,
}

#[derive(Debug, Clone)]
struct DetailFusion {
    mix: InnBlock,
    proj: Pointwise,
}

/// The complete network together with the parameters it owns.
pub struct FusionNet {
    spec: NetworkSpec,
    store: ParamStore,
    input_proj: Conv3x3,
    sfe: Vec<RestormerBlock>,
    bte: Branch,
    dce: Branch,
    base_fusion: BaseFusion,
    detail_fusion: DetailFusion,
    dec_reduce: Pointwise,
    dec_blocks: Vec<RestormerBlock>,
    dec_out: Conv3x3,
}

/// Name prefixes of the parameter groups.
pub mod groups {
    pub const SFE: &str = "encoder.sfe.";
    pub const INPUT: &str = "encoder.input_proj.";
    pub const BTE: &str = "encoder.bte.";
    pub const DCE: &str = "encoder.dce.";
    pub const ENCODER: &str = "encoder.";
    pub const FUSE_BASE: &str = "fusion.base.";
    pub const FUSE_DETAIL: &str = "fusion.detail.";
    pub const FUSION: &str = "fusion.";
    pub const DECODER: &str = "decoder.";
}

impl FusionNet {
    pub fn new(spec: &NetworkSpec, dtype: DType, seed: u64) -> Result<Self> {
        spec.validate()?;
        let c = spec.embed_dim;
        let mut store = ParamStore::new(dtype, seed);
        let mut root = store.root();

        let mut enc = root.sub("encoder");
        let input_proj = Conv3x3::new(&mut enc.sub("input_proj"), 1, c, false)?;
        let sfe = (0..spec.sfe_blocks)
            .map(|i| RestormerBlock::new(&mut enc.sub(format!("sfe.{i}")), spec.block()))
            .collect::<Result<Vec<_>>>()?;
        let bte = {
            let mut s = enc.sub("bte");
            match spec.bte_block_kind {
                BaseKind::Lt => Branch::lt(&mut s, spec)?,
                BaseKind::Inn => Branch::inn(&mut s, spec)?,
            }
        };
        let dce = {
            let mut s = enc.sub("dce");
            match spec.dce_block_kind {
                DetailKind::Inn => Branch::inn(&mut s, spec)?,
                DetailKind::Lt => Branch::lt(&mut s, spec)?,
                DetailKind::Cnn => Branch::cnn(&mut s, spec)?,
            }
        };

        let mut fus = root.sub("fusion");
        let wide = BlockConfig {
            embed_dim: 2 * c,
            ..spec.block()
        };
        let base_fusion = {
            let mut s = fus.sub("base");
            BaseFusion {
                mix: LiteTransformerBlock::new(&mut s.sub("lt"), wide)?,
                proj: Pointwise::new(&mut s.sub("proj"), 2 * c, c, true, false)?,
            }
        };
        let detail_fusion = {
            let mut s = fus.sub("detail");
            DetailFusion {
                mix: InnBlock::new(&mut s.sub("inn"), spec.coupling(2 * c))?,
                proj: Pointwise::new(&mut s.sub("proj"), 2 * c, c, true, false)?,
            }
        };

        let mut dec = root.sub("decoder");
        let dec_reduce = Pointwise::new(&mut dec.sub("reduce"), 2 * c, c, false, false)?;
        let dec_blocks = (0..spec.decoder_blocks)
            .map(|i| RestormerBlock::new(&mut dec.sub(format!("blocks.{i}")), spec.block()))
            .collect::<Result<Vec<_>>>()?;
        let dec_out = Conv3x3::new(&mut dec.sub("out"), c, 1, true)?;

        Ok(Self {
            spec: spec.clone(),
            store,
            input_proj,
            sfe,
            bte,
            dce,
            base_fusion,
            detail_fusion,
            dec_reduce,
            dec_blocks,
            dec_out,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn bte(&self) -> &Branch {
        &self.bte
    }

    pub fn dce(&self) -> &Branch {
        &self.dce
    }

    /// Single-channel image `(B, 1, H, W)` in `[0, 1]` to shared features.
    /// Out-of-range input is clamped with a warning.
    pub fn shared_encode(&self, img: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = dims4(img)?;
        if c != 1 {
            return Err(FuseError::shape(format!(
                "shared encoder takes a single luminance channel, got {c}"
            )));
        }
        let img = img.to_dtype(self.dtype())?;
        let lo = img.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let hi = img.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let img = if lo < 0.0 || hi > 1.0 {
            log::warn!("input outside [0, 1] (min {lo}, max {hi}); clamping");
            img.clamp(0.0, 1.0)?
        } else {
            img
        };
        let x = self.input_proj.forward(&img)?;
        self.sfe.iter().try_fold(x, |h, b| b.forward(&h))
    }

    fn check_embed(&self, x: &Tensor, what: &str) -> Result<()> {
        let (_, c, _, _) = dims4(x)?;
        if c != self.spec.embed_dim {
            return Err(FuseError::config(format!(
                "{what} expects {} channels, got {c}",
                self.spec.embed_dim
            )));
        }
        Ok(())
    }

    pub fn base_encode(&self, shared: &Tensor) -> Result<Tensor> {
        self.check_embed(shared, "base encoder")?;
        self.bte.forward(shared)
    }

    pub fn detail_encode(&self, shared: &Tensor) -> Result<Tensor> {
        self.check_embed(shared, "detail encoder")?;
        self.dce.forward(shared)
    }

    pub fn decompose(&self, img: &Tensor) -> Result<DecomposedFeatures> {
        let shared = self.shared_encode(img)?;
        Ok(DecomposedFeatures {
            base: self.base_encode(&shared)?,
            detail: self.detail_encode(&shared)?,
            shared,
        })
    }

    /// Encodes both modalities in one batched pass.
    pub fn decompose_pair(&self, a: &Tensor, b: &Tensor) -> Result<(DecomposedFeatures, DecomposedFeatures)> {
        if a.dims() != b.dims() {
            return Err(FuseError::shape(format!(
                "paired inputs differ: {:?} vs {:?}",
                a.dims(),
                b.dims()
            )));
        }
        let n = a.dim(0)?;
        let joint = self.decompose(&Tensor::cat(&[a, b], 0)?)?;
        joint.split_batch(n)
    }

    fn check_pair(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
        if a.dims() != b.dims() {
            return Err(FuseError::shape(format!(
                "{what}: {:?} vs {:?}",
                a.dims(),
                b.dims()
            )));
        }
        Ok(())
    }

    pub fn fuse_base(&self, base_a: &Tensor, base_b: &Tensor) -> Result<Tensor> {
        Self::check_pair(base_a, base_b, "base fusion inputs differ")?;
        self.check_embed(base_a, "base fusion")?;
        let joint = Tensor::cat(&[base_a, base_b], 1)?;
        self.base_fusion.proj.forward(&self.base_fusion.mix.forward(&joint)?)
    }

    /// Coupling stage of the detail fusion layer, before the projection.
    pub fn fuse_detail_mix(&self, detail_a: &Tensor, detail_b: &Tensor) -> Result<Tensor> {
        Self::check_pair(detail_a, detail_b, "detail fusion inputs differ")?;
        self.check_embed(detail_a, "detail fusion")?;
        self.detail_fusion.mix.forward(&Tensor::cat(&[detail_a, detail_b], 1)?)
    }

    pub fn fuse_detail_unmix(&self, mixed: &Tensor) -> Result<Tensor> {
        self.detail_fusion.mix.inverse(mixed)
    }

    pub fn fuse_detail(&self, detail_a: &Tensor, detail_b: &Tensor) -> Result<Tensor> {
        let mixed = self.fuse_detail_mix(detail_a, detail_b)?;
        self.detail_fusion.proj.forward(&mixed)
    }

    /// Features to a single-channel image in `[0, 1]`.
    pub fn decode(&self, base: &Tensor, detail: &Tensor) -> Result<Tensor> {
        Self::check_pair(base, detail, "decoder inputs differ")?;
        self.check_embed(base, "decoder")?;
        let x = self.dec_reduce.forward(&Tensor::cat(&[base, detail], 1)?)?;
        let x = self.dec_blocks.iter().try_fold(x, |h, b| b.forward(&h))?;
        ops::sigmoid(&self.dec_out.forward(&x)?)
    }

    pub fn reconstruct(&self, a: &Tensor, b: &Tensor) -> Result<ReconstructionOutput> {
        let (dec_a, dec_b) = self.decompose_pair(a, b)?;
        let n = a.dim(0)?;
        let base = Tensor::cat(&[&dec_a.base, &dec_b.base], 0)?;
        let detail = Tensor::cat(&[&dec_a.detail, &dec_b.detail], 0)?;
        let recon = self.decode(&base, &detail)?;
        Ok(ReconstructionOutput {
            recon_a: recon.narrow(0, 0, n)?,
            recon_b: recon.narrow(0, n, n)?,
            dec_a,
            dec_b,
        })
    }

    pub fn fuse(&self, a: &Tensor, b: &Tensor) -> Result<FusionOutput> {
        let (dec_a, dec_b) = self.decompose_pair(a, b)?;
        let features = FusedFeatures {
            base: self.fuse_base(&dec_a.base, &dec_b.base)?,
            detail: self.fuse_detail(&dec_a.detail, &dec_b.detail)?,
        };
        let fused = self.decode(&features.base, &features.detail)?;
        Ok(FusionOutput {
            fused,
            dec_a,
            dec_b,
            features,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn small() -> NetworkSpec {
        NetworkSpec {
            sfe_blocks: 1,
            embed_dim: 8,
            heads: 2,
            bte_blocks: 1,
            decoder_blocks: 1,
            ..NetworkSpec::default()
        }
    }

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(data, (1, 1, h, w), &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap()
    }

    #[test]
    fn default_spec_encodes_to_64_channels() {
        let net = FusionNet::new(&NetworkSpec::default(), DType::F32, 0).unwrap();
        let phi = net.shared_encode(&image(1, 24, 24)).unwrap();
        assert_eq!(phi.dims(), &[1, 64, 24, 24]);
    }

    #[test]
    fn shapes_through_the_graph() {
        let net = FusionNet::new(&small(), DType::F32, 0).unwrap();
        let (a, b) = (image(1, 12, 10), image(2, 12, 10));
        let out = net.fuse(&a, &b).unwrap();
        assert_eq!(out.fused.dims(), &[1, 1, 12, 10]);
        assert_eq!(out.dec_a.base.dims(), &[1, 8, 12, 10]);
        assert_eq!(out.features.detail.dims(), &[1, 8, 12, 10]);
        let vals = out.fused.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn every_ablation_branch_builds() {
        for (bte, dce) in [
            (BaseKind::Lt, DetailKind::Inn),
            (BaseKind::Inn, DetailKind::Inn),
            (BaseKind::Lt, DetailKind::Lt),
            (BaseKind::Lt, DetailKind::Cnn),
        ] {
            let spec = NetworkSpec {
                bte_block_kind: bte,
                dce_block_kind: dce,
                ..small()
            };
            let net = FusionNet::new(&spec, DType::F32, 0).unwrap();
            let out = net.fuse(&image(3, 8, 8), &image(4, 8, 8)).unwrap();
            assert_eq!(out.fused.dims(), &[1, 1, 8, 8]);
            assert_eq!(net.bte().is_invertible(), bte == BaseKind::Inn);
        }
    }

    #[test]
    fn cnn_branch_parameter_count_tracks_inn() {
        for c in [16, 32, 64] {
            let spec = NetworkSpec {
                embed_dim: c,
                ..NetworkSpec::default()
            };
            let inn = FusionNet::new(&spec, DType::F32, 0).unwrap().store().count(groups::DCE);
            let cnn_spec = NetworkSpec {
                dce_block_kind: DetailKind::Cnn,
                ..spec
            };
            let cnn = FusionNet::new(&cnn_spec, DType::F32, 0).unwrap().store().count(groups::DCE);
            let ratio = cnn as f64 / inn as f64;
            assert!((0.8..=1.2).contains(&ratio), "c={c}: cnn {cnn} vs inn {inn}");
        }
    }

    #[test]
    fn detail_branch_is_invertible() {
        let net = FusionNet::new(&small(), DType::F32, 0).unwrap();
        net.store().randomize(groups::DCE, 0.2, 11).unwrap();
        let shared = net.shared_encode(&image(5, 8, 8)).unwrap();
        let detail = net.detail_encode(&shared).unwrap();
        assert!(max_diff(&net.dce().inverse(&detail).unwrap(), &shared) < 1e-5);
    }

    #[test]
    fn fusion_layers_depend_on_both_inputs() {
        let net = FusionNet::new(&small(), DType::F32, 0).unwrap();
        net.store().randomize(groups::FUSION, 0.2, 12).unwrap();
        let (a, b) = (image(6, 8, 8), image(7, 8, 8));
        let (da, db) = net.decompose_pair(&a, &b).unwrap();
        let bumped = (&db.base + 0.1).unwrap();
        let base = net.fuse_base(&da.base, &db.base).unwrap();
        assert!(max_diff(&base, &net.fuse_base(&da.base, &bumped).unwrap()) > 1e-4);
        assert!(max_diff(&base, &net.fuse_base(&(&da.base + 0.1).unwrap(), &db.base).unwrap()) > 1e-4);
        let detail = net.fuse_detail(&da.detail, &db.detail).unwrap();
        let bumped = (&db.detail + 0.1).unwrap();
        assert!(max_diff(&detail, &net.fuse_detail(&da.detail, &bumped).unwrap()) > 1e-4);
        let mixed = net.fuse_detail_mix(&da.detail, &db.detail).unwrap();
        let joint = Tensor::cat(&[&da.detail, &db.detail], 1).unwrap();
        assert!(max_diff(&net.fuse_detail_unmix(&mixed).unwrap(), &joint) < 1e-5);
        // same inputs, same parameters: bitwise equal
        assert_eq!(max_diff(&base, &net.fuse_base(&da.base, &db.base).unwrap()), 0.0);
    }

    #[test]
    fn rejects_multichannel_and_mismatched_inputs() {
        let net = FusionNet::new(&small(), DType::F32, 0).unwrap();
        let rgb = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(net.shared_encode(&rgb).is_err());
        assert!(net.fuse(&image(1, 8, 8), &image(2, 8, 6)).is_err());
        let wrong = Tensor::zeros((1, 4, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.base_encode(&wrong), Err(FuseError::Config(_))));
    }

    #[test]
    fn out_of_range_input_is_clamped() {
        let net = FusionNet::new(&small(), DType::F32, 0).unwrap();
        let x = image(8, 8, 8);
        let wild = ((&x * 3.0).unwrap() - 1.0).unwrap();
        let clamped = wild.clamp(0f32, 1f32).unwrap();
        let a = net.shared_encode(&wild).unwrap();
        let b = net.shared_encode(&clamped).unwrap();
        assert_eq!(max_diff(&a, &b), 0.0);
    }

    #[test]
    fn config_hash_tracks_architecture() {
        let a = small();
        let mut b = small();
        assert_eq!(a.config_hash(), b.config_hash());
        b.dce_block_kind = DetailKind::Cnn;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
