//! The alternating optimization loop: k_phi critic updates, then k_theta
//! generator updates, repeated until the configured number of generator
//! updates is reached. The last (x, z) batch of the critic inner loop is
//! reused as the first batch of the generator inner loop. One fresh graph
//! per update, freed after the Adam step.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Graph, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::losses::{
    self, critic_loss, gan_generator_loss, gan_losses, generator_loss, gks_estimate,
    input_gradient_norm_sq_mean, IndicatorKind, Mode,
};
use crate::metrics::{median_heuristic_bandwidth, mmd2};
use crate::nn::{self, adam_step, bind, Activation, AdamHyper, MlpSpec, ParamStore};
use crate::rng::RngState;
use crate::targets::{sample_latent, sample_target, SampleSet, SourceLabel, TargetName};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ksgan,
    Gan,
    WganGp,
}

/// Full experiment description. Optional fields carry method-dependent
/// defaults materialized by [`TrainConfig::resolved`]; a resolved config
/// serializes with every field explicit and round-trips to the same run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub target: TargetName,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    /// Critic updates per round; defaults to 1 for ksgan, 5 for baselines.
    #[serde(default)]
    pub k_phi: Option<u32>,
    #[serde(default = "default_k_theta")]
    pub k_theta: u32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_updates")]
    pub generator_updates_total: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_beta_score_penalty")]
    pub beta_score_penalty: f64,
    #[serde(default = "default_gp_weight")]
    pub gp_weight: f64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default)]
    pub generator_arch: Option<MlpSpec>,
    #[serde(default)]
    pub critic_arch: Option<MlpSpec>,
}

fn default_n_train() -> usize {
    65536
}
fn default_k_theta() -> u32 {
    1
}
fn default_batch_size() -> usize {
    512
}
fn default_updates() -> u64 {
    128_000
}
fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.5
}
fn default_beta2() -> f64 {
    0.9
}
fn default_eps() -> f64 {
    1e-8
}
fn default_beta_score_penalty() -> f64 {
    1.0
}
fn default_gp_weight() -> f64 {
    0.1
}
fn default_mode() -> Mode {
    Mode::Mean
}
fn default_eval_every() -> u64 {
    1000
}
fn default_latent_dim() -> usize {
    8
}

impl TrainConfig {
    pub fn new(method: Method, target: TargetName) -> Self {
        TrainConfig {
            method,
            target,
            n_train: default_n_train(),
            k_phi: None,
            k_theta: default_k_theta(),
            batch_size: default_batch_size(),
            generator_updates_total: default_updates(),
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            beta_score_penalty: default_beta_score_penalty(),
            gp_weight: default_gp_weight(),
            mode: default_mode(),
            seed: 0,
            eval_every: default_eval_every(),
            latent_dim: default_latent_dim(),
            generator_arch: None,
            critic_arch: None,
        }
    }

    /// Materialize every default and validate. The five-times critic budget
    /// for the baselines mirrors the synthetic-benchmark protocol.
    pub fn resolved(mut self) -> Result<TrainConfig> {
        if self.k_phi.is_none() {
            self.k_phi = Some(match self.method {
                Method::Ksgan => 1,
                Method::Gan | Method::WganGp => 5,
            });
        }
        if self.generator_arch.is_none() {
            self.generator_arch = Some(MlpSpec::new(
                self.latent_dim,
                vec![512, 512, 512],
                2,
                Activation::Relu,
            ));
        }
        if self.critic_arch.is_none() {
            let mut spec = MlpSpec::new(2, vec![512, 512, 512], 1, Activation::LeakyRelu(0.2));
            spec.spectral_norm = self.method == Method::Gan;
            self.critic_arch = Some(spec);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn k_phi(&self) -> u32 {
        self.k_phi.expect("resolved config")
    }

    pub fn generator_arch(&self) -> &MlpSpec {
        self.generator_arch.as_ref().expect("resolved config")
    }

    pub fn critic_arch(&self) -> &MlpSpec {
        self.critic_arch.as_ref().expect("resolved config")
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.k_phi() < 1 {
            return bad("k_phi must be >= 1".into());
        }
        if self.k_theta < 1 {
            return bad("k_theta must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2".into());
        }
        if self.n_train < 1 {
            return bad("n_train must be >= 1".into());
        }
        if self.eval_every < 1 {
            return bad("eval_every must be >= 1".into());
        }
        if self.latent_dim < 1 {
            return bad("latent_dim must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive and finite, got {}", self.lr));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.beta_score_penalty < 0.0 || self.gp_weight < 0.0 {
            return bad("penalty weights must be nonnegative".into());
        }
        let gen = self.generator_arch();
        let critic = self.critic_arch();
        gen.validate()?;
        critic.validate()?;
        if gen.in_dim != self.latent_dim {
            return bad(format!(
                "generator_arch.in_dim {} must equal latent_dim {}",
                gen.in_dim, self.latent_dim
            ));
        }
        if gen.out_dim != 2 || critic.in_dim != 2 {
            return bad("generator_arch.out_dim and critic_arch.in_dim must be 2".into());
        }
        if critic.out_dim != 1 {
            return bad("critic_arch.out_dim must be 1".into());
        }
        Ok(())
    }
}

/// One evaluation row; written to metrics.jsonl as one JSON object per line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub generator_step: u64,
    pub critic_loss: f64,
    pub generator_loss: f64,
    pub score_penalty: f64,
    pub gks_estimate: f64,
    pub mmd2: Option<f64>,
    pub wall_clock_ms: u64,
}

/// Test/diagnostic hook into the batch schedule.
pub trait TrainObserver {
    fn critic_batch(&mut self, _round: u64, _inner: u32, _x: &Tensor, _z: &Tensor) {}
    /// `x` is present for methods whose generator loss consumes target
    /// samples (ksgan).
    fn generator_batch(&mut self, _step: u64, _x: Option<&Tensor>, _z: &Tensor) {}
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

pub struct TrainOutput {
    pub generator: ParamStore,
    pub critic: ParamStore,
    pub metrics: Vec<MetricsRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Points evaluated per in-training metrics record.
const EVAL_SUBSET: usize = 4096;

struct StepValues {
    critic_loss: f64,
    penalty: f64,
}

fn draw_batch(train_set: &Tensor, batch: usize, rng: &mut RngState) -> Tensor {
    let n = train_set.shape()[0];
    let d = train_set.shape()[1];
    let mut out = Vec::with_capacity(batch * d);
    for _ in 0..batch {
        let i = rng.index(n);
        out.extend_from_slice(&train_set.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![batch, d], out).expect("batch shape")
}

fn named_grad_values(params: &[(String, Var)], grads: &[Var]) -> Vec<(String, Tensor)> {
    params
        .iter()
        .zip(grads)
        .map(|((name, _), g)| (name.clone(), g.value()))
        .collect()
}

/// Run the configured training. Writes resolved-config.json, metrics.jsonl
/// (flushed per record) and checkpoints into `out_dir` when given. `threads`
/// caps workers for the in-training MMD evaluations.
pub fn train(
    config: &TrainConfig,
    out_dir: Option<&Path>,
    threads: usize,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutput> {
    let cfg = config.clone().resolved()?;
    let seed = cfg.seed;
    let gen_spec = cfg.generator_arch().clone();
    let critic_spec = cfg.critic_arch().clone();
    let hyper = AdamHyper {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
    };

    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
            let resolved = serde_json::to_string_pretty(&cfg).expect("config serializes");
            std::fs::write(dir.join("resolved-config.json"), resolved + "\n")
                .map_err(|e| Error::io("write resolved-config.json", e))?;
            let f = std::fs::File::create(dir.join("metrics.jsonl"))
                .map_err(|e| Error::io("create metrics.jsonl", e))?;
            Some(f)
        }
        None => None,
    };

    let mut gen_store = nn::init(&gen_spec, &mut RngState::stream(seed, 0))?;
    let mut critic_store = nn::init(&critic_spec, &mut RngState::stream(seed, 1))?;
    let train_set = sample_target(cfg.target, cfg.n_train, &mut RngState::stream(seed, 2))?.points;
    let mut batch_rng = RngState::stream(seed, 3);
    let mut latent_rng = RngState::stream(seed, 4);
    let mut gp_rng = RngState::stream(seed, 5);
    let mut eval_rng = RngState::stream(seed, 6);
    let heldout = sample_target(
        cfg.target,
        EVAL_SUBSET.min(cfg.n_train.max(2)),
        &mut RngState::stream(seed, 7),
    )?
    .points;

    let started = Instant::now();
    let total = cfg.generator_updates_total;
    let checkpoint_every = total / 10;
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut done: u64 = 0;
    let mut round: u64 = 0;
    let mut last_values = StepValues {
        critic_loss: 0.0,
        penalty: 0.0,
    };
    let mut last_gen_loss;

    let abort = |loss: &str,
                 step: u64,
                 gen_store: &ParamStore,
                 critic_store: &ParamStore,
                 metrics_file: &mut Option<std::fs::File>|
     -> Error {
        let mut norms: Vec<(String, f64)> = gen_store
            .param_norms()
            .into_iter()
            .map(|(n, v)| (format!("generator.{n}"), v))
            .collect();
        norms.extend(
            critic_store
                .param_norms()
                .into_iter()
                .map(|(n, v)| (format!("critic.{n}"), v)),
        );
        if let Some(f) = metrics_file.as_mut() {
            let diag = serde_json::json!({
                "abort": { "generator_step": step, "loss": loss, "param_norms": norms }
            });
            let _ = writeln!(f, "{diag}");
            let _ = f.flush();
        }
        Error::NonFinite {
            loss: loss.to_string(),
            step,
            param_norms: norms,
        }
    };

    while done < total {
        let mut last_batch: Option<(Tensor, Tensor)> = None;
        for inner in 0..cfg.k_phi() {
            let x = draw_batch(&train_set, cfg.batch_size, &mut batch_rng);
            let z = sample_latent(cfg.batch_size, cfg.latent_dim, &mut latent_rng)?.points;
            observer.critic_batch(round, inner, &x, &z);
            last_values = critic_step(
                &cfg,
                &gen_spec,
                &critic_spec,
                &mut gen_store,
                &mut critic_store,
                &hyper,
                &x,
                &z,
                &mut gp_rng,
            )?;
            if !last_values.critic_loss.is_finite() || !last_values.penalty.is_finite() {
                return Err(abort("critic_loss", done, &gen_store, &critic_store, &mut metrics_file));
            }
            last_batch = Some((x, z));
        }

        let gens_now = (cfg.k_theta as u64).min(total - done);
        for j in 0..gens_now {
            let (x, z) = if j == 0 {
                last_batch.take().expect("k_phi >= 1")
            } else {
                let x = if cfg.method == Method::Ksgan {
                    draw_batch(&train_set, cfg.batch_size, &mut batch_rng)
                } else {
                    Tensor::zeros(&[0, 2])
                };
                let z = sample_latent(cfg.batch_size, cfg.latent_dim, &mut latent_rng)?.points;
                (x, z)
            };
            let x_opt = (cfg.method == Method::Ksgan).then_some(&x);
            observer.generator_batch(done + 1, x_opt, &z);
            last_gen_loss = generator_step(
                &cfg,
                &gen_spec,
                &critic_spec,
                &mut gen_store,
                &mut critic_store,
                &hyper,
                x_opt,
                &z,
            )?;
            if !last_gen_loss.is_finite() {
                return Err(abort("generator_loss", done + 1, &gen_store, &critic_store, &mut metrics_file));
            }
            done += 1;

            if done % cfg.eval_every == 0 {
                let record = evaluate(
                    &cfg,
                    &gen_spec,
                    &critic_spec,
                    &mut gen_store,
                    &critic_store,
                    &heldout,
                    &mut eval_rng,
                    threads,
                    done,
                    &last_values,
                    last_gen_loss,
                    started,
                )?;
                if let Some(f) = metrics_file.as_mut() {
                    writeln!(f, "{}", serde_json::to_string(&record).expect("record serializes"))
                        .map_err(|e| Error::io("write metrics.jsonl", e))?;
                    f.flush().map_err(|e| Error::io("flush metrics.jsonl", e))?;
                }
                metrics.push(record);
            }
            if checkpoint_every > 0 && done % checkpoint_every == 0 && done < total {
                if let Some(dir) = out_dir {
                    let path = dir.join(format!("checkpoint-step-{done:07}.ksgn"));
                    checkpoint::save(&path, &[("generator", &gen_store), ("critic", &critic_store)])?;
                    checkpoints.push(path);
                }
            }
        }
        round += 1;
    }

    if let Some(dir) = out_dir {
        let path = dir.join("checkpoint-final.ksgn");
        checkpoint::save(&path, &[("generator", &gen_store), ("critic", &critic_store)])?;
        checkpoints.push(path);
    }

    Ok(TrainOutput {
        generator: gen_store,
        critic: critic_store,
        metrics,
        checkpoints,
    })
}

#[allow(clippy::too_many_arguments)]
fn critic_step(
    cfg: &TrainConfig,
    gen_spec: &MlpSpec,
    critic_spec: &MlpSpec,
    gen_store: &mut ParamStore,
    critic_store: &mut ParamStore,
    hyper: &AdamHyper,
    x: &Tensor,
    z: &Tensor,
    gp_rng: &mut RngState,
) -> Result<StepValues> {
    let graph = Graph::new();
    let gen = bind(&graph, gen_store, gen_spec, false)?;
    let x_g = gen.forward(&graph.constant(z.clone()))?.value();
    let critic = bind(&graph, critic_store, critic_spec, true)?;

    let (objective, values) = match cfg.method {
        Method::Ksgan => {
            let xf = graph.leaf(x.clone(), true);
            let xg = graph.leaf(x_g, true);
            let c_f = critic.forward(&xf)?;
            let c_g = critic.forward(&xg)?;
            let l_c = critic_loss(&c_f, &c_g)?;
            let r_g = input_gradient_norm_sq_mean(&c_g, &xg)?;
            let r_f = input_gradient_norm_sq_mean(&c_f, &xf)?;
            let r_c = r_g.add(&r_f)?;
            // Maximize L_c - beta R_c by minimizing its negation.
            let obj = r_c.scale(cfg.beta_score_penalty).sub(&l_c)?;
            let values = StepValues {
                critic_loss: l_c.scalar()?,
                penalty: r_c.scalar()?,
            };
            (obj, values)
        }
        Method::Gan => {
            let d_f = critic.forward(&graph.constant(x.clone()))?;
            let d_g = critic.forward(&graph.constant(x_g))?;
            let (disc, _) = gan_losses(&d_f, &d_g, false)?;
            let values = StepValues {
                critic_loss: disc.scalar()?,
                penalty: 0.0,
            };
            (disc, values)
        }
        Method::WganGp => {
            let xf = graph.constant(x.clone());
            let xg = graph.constant(x_g);
            let parts = losses::wgan_gp_losses(&critic, &xf, &xg, cfg.gp_weight, gp_rng)?;
            let values = StepValues {
                critic_loss: parts.critic_part.scalar()?,
                penalty: parts.penalty,
            };
            (parts.critic_part, values)
        }
    };

    let refs: Vec<&Var> = critic.params().iter().map(|(_, v)| v).collect();
    let grads = grad(&objective, &refs, false)?;
    adam_step(critic_store, &named_grad_values(critic.params(), &grads), hyper)?;
    Ok(values)
}

#[allow(clippy::too_many_arguments)]
fn generator_step(
    cfg: &TrainConfig,
    gen_spec: &MlpSpec,
    critic_spec: &MlpSpec,
    gen_store: &mut ParamStore,
    critic_store: &mut ParamStore,
    hyper: &AdamHyper,
    x: Option<&Tensor>,
    z: &Tensor,
) -> Result<f64> {
    let graph = Graph::new();
    let gen = bind(&graph, gen_store, gen_spec, true)?;
    let critic = bind(&graph, critic_store, critic_spec, false)?;
    let x_g = gen.forward(&graph.constant(z.clone()))?;

    let loss = match cfg.method {
        Method::Ksgan => {
            let x = x.expect("ksgan generator step needs a target batch");
            let c_f = critic.forward(&graph.constant(x.clone()))?;
            let c_g = critic.forward(&x_g)?;
            generator_loss(&c_f, &c_g, cfg.mode, IndicatorKind::Hard)?.total
        }
        Method::Gan => gan_generator_loss(&critic.forward(&x_g)?, false)?,
        Method::WganGp => critic.forward(&x_g)?.mean().neg(),
    };

    let refs: Vec<&Var> = gen.params().iter().map(|(_, v)| v).collect();
    let grads = grad(&loss, &refs, false)?;
    adam_step(gen_store, &named_grad_values(gen.params(), &grads), hyper)?;
    loss.scalar()
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    cfg: &TrainConfig,
    gen_spec: &MlpSpec,
    critic_spec: &MlpSpec,
    gen_store: &mut ParamStore,
    critic_store: &ParamStore,
    heldout: &Tensor,
    eval_rng: &mut RngState,
    threads: usize,
    step: u64,
    values: &StepValues,
    gen_loss: f64,
    started: Instant,
) -> Result<MetricsRecord> {
    let n_eval = EVAL_SUBSET.min(heldout.shape()[0]);
    let z = sample_latent(n_eval, cfg.latent_dim, eval_rng)?.points;
    let model_pts = nn::eval_forward(gen_store, gen_spec, &z)?;

    // Evaluate the critic on a snapshot so spectral-norm power iterations
    // cannot disturb training state.
    let mut critic_snapshot = critic_store.clone();
    let gks = gks_estimate(heldout, &model_pts, &mut |pts| {
        nn::eval_forward(&mut critic_snapshot, critic_spec, pts)
    })?;

    let mmd = {
        let mut union = heldout.data().to_vec();
        union.extend_from_slice(model_pts.data());
        let union = Tensor::new(vec![heldout.shape()[0] + model_pts.shape()[0], 2], union)?;
        match median_heuristic_bandwidth(&union) {
            Ok(bw) => Some(mmd2(heldout, &model_pts, bw, threads)?.mmd2),
            Err(_) => None,
        }
    };

    Ok(MetricsRecord {
        generator_step: step,
        critic_loss: values.critic_loss,
        generator_loss: gen_loss,
        score_penalty: values.penalty,
        gks_estimate: gks.value,
        mmd2: mmd,
        wall_clock_ms: started.elapsed().as_millis() as u64,
    })
}

/// Sample from a trained generator checkpoint: fresh latent draws pushed
/// through the stored net (architecture inferred from the weight shapes).
pub fn sample_model(checkpoint_path: &Path, n: usize, rng: &mut RngState) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample_model requires n >= 1".to_string()));
    }
    let mut store = checkpoint::load_section(checkpoint_path, "generator")?;
    let spec = nn::infer_spec(&store, Activation::Relu)?;
    let z = sample_latent(n, spec.in_dim, rng)?;
    let points = nn::eval_forward(&mut store, &spec, &z.points)?;
    Ok(SampleSet {
        points,
        label: SourceLabel::Model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(method: Method) -> TrainConfig {
        let mut cfg = TrainConfig::new(method, TargetName::EightGaussians);
        cfg.n_train = 256;
        cfg.batch_size = 16;
        cfg.generator_updates_total = 6;
        cfg.eval_every = 2;
        cfg.generator_arch = Some(MlpSpec::new(8, vec![8, 8], 2, Activation::Relu));
        let mut critic = MlpSpec::new(2, vec![8, 8], 1, Activation::LeakyRelu(0.2));
        critic.spectral_norm = method == Method::Gan;
        cfg.critic_arch = Some(critic);
        cfg
    }

    fn store_bits(s: &ParamStore) -> Vec<u64> {
        s.names()
            .flat_map(|n| s.get(n).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn zero_updates_is_a_noop_run() {
        let mut cfg = tiny_config(Method::Ksgan);
        cfg.generator_updates_total = 0;
        let out = train(&cfg, None, 1, &mut NoopObserver).unwrap();
        assert!(out.metrics.is_empty());
        let fresh = nn::init(cfg.generator_arch.as_ref().unwrap(), &mut RngState::stream(0, 0)).unwrap();
        assert_eq!(store_bits(&out.generator), store_bits(&fresh));
    }

    #[test]
    fn same_seed_gives_bit_identical_runs() {
        for method in [Method::Ksgan, Method::Gan, Method::WganGp] {
            let cfg = tiny_config(method);
            let a = train(&cfg, None, 1, &mut NoopObserver).unwrap();
            let b = train(&cfg, None, 1, &mut NoopObserver).unwrap();
            assert_eq!(store_bits(&a.generator), store_bits(&b.generator), "{method:?}");
            assert_eq!(store_bits(&a.critic), store_bits(&b.critic), "{method:?}");
            let strip = |m: &[MetricsRecord]| -> Vec<(u64, u64, u64, u64, u64, Option<u64>)> {
                m.iter()
                    .map(|r| {
                        (
                            r.generator_step,
                            r.critic_loss.to_bits(),
                            r.generator_loss.to_bits(),
                            r.score_penalty.to_bits(),
                            r.gks_estimate.to_bits(),
                            r.mmd2.map(|v| v.to_bits()),
                        )
                    })
                    .collect()
            };
            assert_eq!(strip(&a.metrics), strip(&b.metrics), "{method:?}");
        }
    }

    struct Accounting {
        critic_calls: u64,
        generator_calls: u64,
        last_critic_batch: Option<(Vec<u64>, Vec<u64>)>,
        first_generator_matches: Vec<bool>,
        expecting_first: bool,
    }

    impl TrainObserver for Accounting {
        fn critic_batch(&mut self, _round: u64, _inner: u32, x: &Tensor, z: &Tensor) {
            self.critic_calls += 1;
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            self.last_critic_batch = Some((bits(x), bits(z)));
            self.expecting_first = true;
        }
        fn generator_batch(&mut self, _step: u64, x: Option<&Tensor>, z: &Tensor) {
            self.generator_calls += 1;
            if self.expecting_first {
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                let (lx, lz) = self.last_critic_batch.as_ref().unwrap();
                let matches = x.map(|x| &bits(x) == lx).unwrap_or(true) && &bits(z) == lz;
                self.first_generator_matches.push(matches);
                self.expecting_first = false;
            }
        }
    }

    #[test]
    fn batch_accounting_and_reuse() {
        let mut cfg = tiny_config(Method::Ksgan);
        cfg.k_phi = Some(3);
        cfg.k_theta = 2;
        cfg.generator_updates_total = 7; // 4 rounds: 2+2+2+1 generator updates
        let mut obs = Accounting {
            critic_calls: 0,
            generator_calls: 0,
            last_critic_batch: None,
            first_generator_matches: vec![],
            expecting_first: true,
        };
        train(&cfg, None, 1, &mut obs).unwrap();
        // ceil(7/2) = 4 rounds, 3 critic updates each.
        assert_eq!(obs.critic_calls, 12);
        assert_eq!(obs.generator_calls, 7);
        assert_eq!(obs.first_generator_matches, vec![true; 4]);
    }

    #[test]
    fn wgan_and_gan_reuse_latent_batch() {
        for method in [Method::Gan, Method::WganGp] {
            let mut cfg = tiny_config(method);
            cfg.k_phi = Some(2);
            cfg.generator_updates_total = 4;
            let mut obs = Accounting {
                critic_calls: 0,
                generator_calls: 0,
                last_critic_batch: None,
                first_generator_matches: vec![],
                expecting_first: true,
            };
            train(&cfg, None, 1, &mut obs).unwrap();
            assert_eq!(obs.critic_calls, 8, "{method:?}");
            assert_eq!(obs.first_generator_matches, vec![true; 4], "{method:?}");
        }
    }

    #[test]
    fn run_writes_artifacts_and_checkpoint_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(Method::Ksgan);
        cfg.generator_updates_total = 10; // checkpoint cadence 1
        let out = train(&cfg, Some(dir.path()), 1, &mut NoopObserver).unwrap();
        assert!(dir.path().join("resolved-config.json").exists());
        assert!(dir.path().join("metrics.jsonl").exists());
        assert!(dir.path().join("checkpoint-final.ksgn").exists());
        // 9 intermediate (10%, ..., 90%) plus final.
        assert_eq!(out.checkpoints.len(), 10);

        let loaded = checkpoint::load_section(&out.checkpoints.last().unwrap(), "generator").unwrap();
        assert_eq!(store_bits(&loaded), store_bits(&out.generator));

        // Resolved config reloads to the identical run.
        let raw = std::fs::read_to_string(dir.path().join("resolved-config.json")).unwrap();
        let reloaded: TrainConfig = serde_json::from_str(&raw).unwrap();
        let again = train(&reloaded, None, 1, &mut NoopObserver).unwrap();
        assert_eq!(store_bits(&again.generator), store_bits(&out.generator));
    }

    #[test]
    fn sample_model_is_deterministic_and_shaped() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(Method::Ksgan);
        train(&cfg, Some(dir.path()), 1, &mut NoopObserver).unwrap();
        let ck = dir.path().join("checkpoint-final.ksgn");
        let a = sample_model(&ck, 5, &mut RngState::seed_from_u64(9)).unwrap();
        let b = sample_model(&ck, 5, &mut RngState::seed_from_u64(9)).unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.points.shape(), &[5, 2]);
        assert!(sample_model(&ck, 0, &mut RngState::seed_from_u64(9)).is_err());
    }

    #[test]
    fn zero_final_layer_generator_emits_bias() {
        let dir = tempfile::tempdir().unwrap();
        let spec = MlpSpec::new(8, vec![4], 2, Activation::Relu);
        let mut store = nn::init(&spec, &mut RngState::seed_from_u64(3)).unwrap();
        *store.get_mut("w1").unwrap() = Tensor::zeros(&[4, 2]);
        *store.get_mut("b1").unwrap() = Tensor::vector(&[0.25, -0.75]);
        let path = dir.path().join("ck.ksgn");
        checkpoint::save(&path, &[("generator", &store)]).unwrap();
        let set = sample_model(&path, 7, &mut RngState::seed_from_u64(1)).unwrap();
        for row in set.points.rows() {
            assert_eq!(row, &[0.25, -0.75]);
        }
    }

    #[test]
    fn config_validation_names_offending_field() {
        let mut cfg = tiny_config(Method::Ksgan);
        cfg.k_phi = Some(0);
        let err = cfg.resolved().unwrap_err().to_string();
        assert!(err.contains("k_phi"), "{err}");

        let mut cfg = tiny_config(Method::Ksgan);
        cfg.batch_size = 1;
        assert!(cfg.resolved().unwrap_err().to_string().contains("batch_size"));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let json = r#"{"method": "ksgan", "target": "moons", "unknown_knob": 3}"#;
        let parsed: std::result::Result<TrainConfig, _> = serde_json::from_str(json);
        let err = parsed.unwrap_err().to_string();
        assert!(err.contains("unknown_knob"), "{err}");
    }

    #[test]
    fn method_dependent_k_phi_defaults() {
        let ksgan = TrainConfig::new(Method::Ksgan, TargetName::Moons).resolved().unwrap();
        assert_eq!(ksgan.k_phi(), 1);
        let wgan = TrainConfig::new(Method::WganGp, TargetName::Moons).resolved().unwrap();
        assert_eq!(wgan.k_phi(), 5);
        let gan = TrainConfig::new(Method::Gan, TargetName::Moons).resolved().unwrap();
        assert_eq!(gan.k_phi(), 5);
        assert!(gan.critic_arch().spectral_norm);
        assert!(!wgan.critic_arch().spectral_norm);
    }
}
