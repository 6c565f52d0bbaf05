//! The full network: projection, disentanglement, the shared and private
//! branches, token fusion and the classifier, wired according to the
//! ablation flags of a [`Config`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Ablation, Config};
use crate::data::{Conversation, Dataset, ModalityDims};
use crate::disentangle::{self, DecouplingLosses, Triplet};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionShape, LossWeights};
use crate::math::{finite_diff_check, Bound, EigOptions, GradCheckOptions, GradCheckReport, ParamStore, Tape, Tensor, Var};
use crate::nn::modality_blocks;
use crate::private_branch::{self as private, JacobiFilterBank};
use crate::shared_branch::{self as shared, GraphCache};

/// Dataset-dependent sizes a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub dims: ModalityDims,
    pub num_classes: usize,
    pub num_speakers: usize,
}

impl ModelShape {
    pub fn of(d: &Dataset) -> Self {
        Self {
            dims: d.dims,
            num_classes: d.num_classes,
            num_speakers: d.num_speakers,
        }
    }
}

/// Every loss term of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Losses<'t> {
    pub total: Var<'t>,
    pub cls: Var<'t>,
    pub dec: Var<'t>,
    pub cl: Var<'t>,
    pub prt: Var<'t>,
}

#[derive(Debug, Clone, Copy)]
pub struct Forward<'t> {
    pub logits: Var<'t>,
    pub h_com: Var<'t>,
    pub h_prt: Option<Var<'t>>,
    pub s_bar: Var<'t>,
    pub losses: Losses<'t>,
}

/// Plain values of [`Losses`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossValues {
    pub total: f64,
    pub cls: f64,
    pub dec: f64,
    pub cl: f64,
    pub prt: f64,
}

impl From<&Losses<'_>> for LossValues {
    fn from(l: &Losses<'_>) -> Self {
        Self {
            total: l.total.item(),
            cls: l.cls.item(),
            dec: l.dec.item(),
            cl: l.cl.item(),
            prt: l.prt.item(),
        }
    }
}

#[derive(Debug)]
pub struct Model {
    pub config: Config,
    pub shape: ModelShape,
    pub params: ParamStore,
    cache: GraphCache,
}

impl Model {
    /// Freshly initialized parameters drawn from `seed`.
    pub fn new(config: Config, shape: ModelShape) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, &shape)?;
        Ok(Self {
            config,
            shape,
            params,
            cache: GraphCache::default(),
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: Config, shape: ModelShape, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let template = init_params(&config, &shape)?;
        if template.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                template.len(),
                params.len()
            )));
        }
        for ((want, wt), (got, gt)) in template.iter().zip(params.iter()) {
            if want != got || wt.shape() != gt.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {got} {:?} does not match expected {want} {:?}",
                    gt.shape(),
                    wt.shape()
                )));
            }
        }
        Ok(Self {
            config,
            shape,
            params,
            cache: GraphCache::default(),
        })
    }

    pub fn fusion_shape(&self) -> FusionShape {
        fusion_shape(&self.config, &self.shape)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.config.lambda1,
            lambda2: self.config.lambda2,
            lambda3: self.config.lambda3,
        }
    }

    fn eig_options(&self) -> EigOptions {
        EigOptions {
            max_dim: self.config.eig_cap,
            ..EigOptions::default()
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, p: &Bound<'t>, conv: &Conversation, triplets: &[Triplet]) -> Result<Forward<'t>> {
        let cfg = &self.config;
        let n = conv.len();
        if n == 0 {
            return Err(Error::Dataset(format!("conversation {} is empty", conv.id)));
        }
        let zero = tape.scalar(0.0)?;
        let projected = disentangle::project_inputs(tape, p, conv)?;

        let (com, prt, dec) = if cfg.is_ablated(Ablation::Decoupler) {
            (projected, projected, zero)
        } else {
            let dis = disentangle::disentangle_forward(p, projected, n)?;
            let recon = disentangle::decode(p, &dis)?;
            let parts = DecouplingLosses {
                rec: disentangle::loss_rec(projected, recon)?,
                cyc: disentangle::loss_cyc(p, &dis, recon)?,
                mar: disentangle::loss_mar(dis.com, triplets, cfg.alpha)?,
                ort: disentangle::loss_ort(dis.com, dis.prt)?,
            };
            (dis.com, dis.prt, disentangle::loss_dec(&parts, cfg.gamma1, cfg.gamma2)?)
        };

        let (h_com, cl) = if cfg.is_ablated(Ablation::SharedBranch) {
            let [t, a, v] = modality_blocks(com, n)?;
            (t.add(a)?.add(v)?.scale(1.0 / 3.0)?, zero)
        } else {
            let graph = self.cache.get_or_build(n, cfg.window_k, &self.eig_options())?;
            let views = shared::spectral_filter(&graph, com, cfg.tau_low, cfg.tau_high)?;
            (
                shared::shared_fuse(p, &views, n)?,
                shared::info_nce(p, &views, cfg.nce_temperature)?,
            )
        };

        let speakers = conv.speakers();
        let x_tilde = private::inject_speaker(p, prt, &speakers, self.shape.num_speakers)?;
        let (s_bar, h_prt, prt_loss) = if cfg.is_ablated(Ablation::PrivateBranch) {
            (x_tilde, None, zero)
        } else {
            let s_bar = self.private_filter(p, x_tilde, &speakers)?;
            let h_prt = private::private_fuse(p, s_bar, n)?;
            let rec = private::loss_rec_prt(p, x_tilde, s_bar, n)?;
            let cons = private::loss_cons(h_prt, &speakers)?;
            (s_bar, Some(h_prt), private::loss_prt(rec, cons, cfg.beta_cons)?)
        };

        let fshape = self.fusion_shape();
        let u = if cfg.is_ablated(Ablation::TransformerFusion) {
            fusion::direct_fusion(p, h_com, s_bar)?
        } else {
            let tokens = fusion::build_tokens(p, h_com, s_bar)?;
            fusion::fusion_outputs(fusion::transformer_encode(p, tokens, &fshape)?)?
        };
        let logits = fusion::classifier_logits(p, u)?;
        let cls = fusion::loss_cls(logits, &conv.labels())?;
        let total = fusion::loss_total(cls, dec, cl, prt_loss, &self.loss_weights())?;
        Ok(Forward {
            logits,
            h_com,
            h_prt,
            s_bar,
            losses: Losses {
                total,
                cls,
                dec,
                cl,
                prt: prt_loss,
            },
        })
    }

    /// Speaker graph → dual hypergraph → Jacobi filter bank → attention →
    /// projection back. Without edges (a single utterance) `x̃` passes through.
    fn private_filter<'t>(&self, p: &Bound<'t>, x_tilde: Var<'t>, speakers: &[usize]) -> Result<Var<'t>> {
        let cfg = &self.config;
        let edges = private::build_speaker_graph(speakers, cfg.w_same, cfg.w_cross);
        if edges.is_empty() {
            return Ok(x_tilde);
        }
        let (hg, x_star) = private::dual_transform(3 * speakers.len(), &edges, x_tilde)?;
        let l_star = private::hypergraph_laplacian(&hg)?;
        let lmax = private::lambda_max(&l_star, &self.eig_options())?;
        let l_tilde = private::rescale_laplacian(&l_star, lmax);
        let bank = JacobiFilterBank::new(cfg.jacobi_order_r, cfg.jacobi_alpha, cfg.jacobi_beta)?;
        let zs = private::jacobi_filter_bank(p, &l_tilde, x_star, &bank)?;
        let (s_star, _) = private::attention_fuse(p, &zs)?;
        private::project_back(&hg, s_star)
    }

    /// Loss values and per-parameter gradients (in store order) of one conversation.
    pub fn loss_and_grads(&self, conv: &Conversation, triplets: &[Triplet]) -> Result<(LossValues, Vec<Tensor>)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let out = self.forward(&tape, &p, conv, triplets)?;
        let grads = tape.backward(out.losses.total)?;
        Ok((LossValues::from(&out.losses), grads.param_grads(&self.params.shapes())))
    }

    /// Classifier logits (N × C) without auxiliary triplets.
    pub fn logits(&self, conv: &Conversation) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let out = self.forward(&tape, &p, conv, &[])?;
        Ok((*out.logits.value()).clone())
    }

    pub fn predict(&self, conv: &Conversation) -> Result<Vec<usize>> {
        Ok(fusion::classify(&self.logits(conv)?).1)
    }
}

/// Finite-difference check of the summed total loss over every conversation
/// of `data`. Triplets are mined once from `opts.seed` and then held fixed.
pub fn gradient_check(model: &mut Model, data: &Dataset, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let triplets: Vec<Vec<Triplet>> = data
        .conversations
        .iter()
        .map(|c| {
            if model.config.disable_decoupler {
                Vec::new()
            } else {
                disentangle::mine_triplets(&c.labels(), model.config.triplets_per_anchor, &mut rng)
            }
        })
        .collect();
    let mut params = std::mem::take(&mut model.params);
    let frozen: &Model = model;
    let report = finite_diff_check(&mut params, opts, |tape, p| {
        let mut total = tape.scalar(0.0)?;
        for (conv, trip) in data.conversations.iter().zip(&triplets) {
            total = total.add(frozen.forward(tape, p, conv, trip)?.losses.total)?;
        }
        Ok(total)
    });
    model.params = params;
    report
}

fn fusion_shape(cfg: &Config, shape: &ModelShape) -> FusionShape {
    FusionShape {
        d_com: if cfg.disable_shared_branch { cfg.latent_dim } else { cfg.branch_dim },
        d_prt: cfg.latent_dim,
        d_fusion: cfg.d_fusion,
        n_heads: cfg.n_heads,
        n_layers: cfg.n_layers,
        num_classes: shape.num_classes,
    }
}

/// Only the parameters the enabled components use, in a fixed order.
fn init_params(cfg: &Config, shape: &ModelShape) -> Result<ParamStore> {
    if shape.num_classes < 2 || shape.num_speakers == 0 {
        return Err(Error::Dataset(format!(
            "model needs at least 2 classes and 1 speaker (got {} and {})",
            shape.num_classes, shape.num_speakers
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let d = cfg.latent_dim;
    disentangle::init_projection(&mut store, shape.dims, d, &mut rng);
    if !cfg.disable_decoupler {
        disentangle::init_params(&mut store, d, &mut rng);
    }
    if !cfg.disable_shared_branch {
        shared::init_params(&mut store, d, cfg.branch_dim, cfg.proj_dim, &mut rng);
    }
    private::init_speaker(&mut store, d, shape.num_speakers, &mut rng);
    if !cfg.disable_private_branch {
        private::init_params(&mut store, d, cfg.branch_dim, cfg.jacobi_order_r, &mut rng);
    }
    let fshape = fusion_shape(cfg, shape);
    if cfg.disable_transformer_fusion {
        fusion::init_direct(&mut store, &fshape, &mut rng);
    } else {
        fusion::init_tokens(&mut store, &fshape, &mut rng);
        fusion::init_encoder(&mut store, &fshape, &mut rng);
    }
    fusion::init_classifier(&mut store, &fshape, &mut rng);
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};

    fn small_config() -> Config {
        Config::parse("latent_dim=6\nbranch_dim=5\nproj_dim=3\nd_fusion=4\nn_layers=1\njacobi_order_R=2\nsynth_dim_t=5\nsynth_dim_a=4\nsynth_dim_v=3\nsynth_conversations=2\n").unwrap()
    }

    fn toy(cfg: &Config) -> Dataset {
        synth_generate(&SynthSpec::from_config(cfg), 1).unwrap()
    }

    #[test]
    fn forward_shapes_and_finite_losses() {
        let cfg = small_config();
        let data = toy(&cfg);
        let model = Model::new(cfg, ModelShape::of(&data)).unwrap();
        for conv in &data.conversations {
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let out = model.forward(&tape, &p, conv, &[]).unwrap();
            assert_eq!(out.logits.dims(), (conv.len(), data.num_classes));
            let v = LossValues::from(&out.losses);
            assert!(v.total.is_finite() && v.cls > 0.0);
        }
    }

    #[test]
    fn ablations_zero_their_terms() {
        let cfg = small_config();
        let data = toy(&cfg);
        let conv = &data.conversations[0];
        for a in Ablation::ALL {
            let model = Model::new(cfg.clone().with_ablation(a), ModelShape::of(&data)).unwrap();
            let (v, grads) = model.loss_and_grads(conv, &[]).unwrap();
            assert!(v.total.is_finite());
            assert_eq!(grads.len(), model.params.len());
            match a {
                Ablation::Decoupler => assert_eq!(v.dec, 0.0),
                Ablation::SharedBranch => {
                    assert_eq!(v.cl, 0.0);
                    assert!(!model.params.iter().any(|(n, _)| n.starts_with("shared.")));
                }
                Ablation::PrivateBranch => assert_eq!(v.prt, 0.0),
                Ablation::TransformerFusion => assert!(model.params.get("fus.direct.w").is_some()),
            }
        }
    }

    #[test]
    fn single_utterance_conversation_runs() {
        let cfg = small_config();
        let mut data = toy(&cfg);
        data.conversations[0].utterances.truncate(1);
        let model = Model::new(cfg, ModelShape::of(&data)).unwrap();
        let (v, _) = model.loss_and_grads(&data.conversations[0], &[]).unwrap();
        assert!(v.total.is_finite());
    }

    #[test]
    fn from_parts_rejects_mismatched_store() {
        let cfg = small_config();
        let data = toy(&cfg);
        let model = Model::new(cfg.clone(), ModelShape::of(&data)).unwrap();
        let ok = Model::from_parts(cfg.clone(), model.shape, model.params.clone());
        assert!(ok.is_ok());
        let other = cfg.with_ablation(Ablation::PrivateBranch);
        assert!(Model::from_parts(other, model.shape, model.params.clone()).is_err());
    }
}
