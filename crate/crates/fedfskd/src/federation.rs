//! The server/client protocol: round loop, per-client local SGD, data-size
//! weighted aggregation, teacher distribution and delayed EMA updates.
//!
//! Clients own their datasets exclusively; only model parameters and scalar
//! summaries ever cross the client/server boundary. All seed streams derive
//! from `(seed, client_id, round, iteration)`, so results are independent of
//! dispatch order and runs can resume from a round checkpoint bit-exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{lambda_schedule, LossBreakdown, LossWeights};
use crate::metrics::{self, MetricsRow};
use crate::rng::{derive_rng, derive_seed, tag};
use crate::segnet::{
    forward, init_params, loss_and_gradients, param_axpy_inplace, ForwardMode, LatentCode,
    ModelConfig, ModelParams, ObjectiveSpec, SoftLabel, TeacherSignal, UnlabeledTerm,
};
use crate::synthdata::ClientDataset;
use crate::uncertainty::{
    confidence_mask, entropy_threshold, mc_teacher_pass, UncertaintyConfig, UncertaintyMap,
};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Local,
    Semi,
    Ours,
}

impl Variant {
    pub fn uses_unlabeled(self) -> bool {
        !matches!(self, Variant::Local)
    }

    pub fn uses_feature_kd(self) -> bool {
        matches!(self, Variant::Ours)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Local => "local",
            Variant::Semi => "semi",
            Variant::Ours => "ours",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Variant::Local),
            "semi" => Ok(Variant::Semi),
            "ours" => Ok(Variant::Ours),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    DataSize,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub rounds: usize,
    /// Local iterations E per communication round.
    pub client_iterations: usize,
    pub learning_rate: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub ema_decay: f64,
    /// First round (1-based) at which teacher replicas are EMA-updated.
    pub ema_start_round: usize,
    pub aggregation: Aggregation,
    pub variant: Variant,
    /// Alternative reading of the EMA source: update teacher replicas from
    /// the aggregated global student instead of each client's own student.
    pub teacher_ema_from_global: bool,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            num_clients: 4,
            rounds: 20,
            client_iterations: 50,
            learning_rate: 0.05,
            batch_labeled: 2,
            batch_unlabeled: 2,
            ema_decay: 0.99,
            ema_start_round: 6,
            aggregation: Aggregation::DataSize,
            variant: Variant::Ours,
            teacher_ema_from_global: false,
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.rounds == 0 || self.client_iterations == 0 {
            return Err(Error::Config(
                "num_clients, rounds and client_iterations must be >= 1".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must be in [0, 1)".into()));
        }
        if self.ema_start_round == 0 {
            return Err(Error::Config("ema_start_round must be >= 1".into()));
        }
        if self.batch_labeled == 0 {
            return Err(Error::Config("batch_labeled must be >= 1".into()));
        }
        Ok(())
    }
}

/// Exact weighted mean of compatible parameter sets. Weights must be
/// nonnegative and sum to 1 within 1e-9; summation runs in slice order
/// (callers canonicalize by client id).
pub fn aggregate(models: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(Error::BadWeights(format!(
            "{} models vs {} weights",
            models.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| *w < 0.0) {
        return Err(Error::BadWeights("negative weight".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::BadWeights(format!("weights sum to {sum}, not 1")));
    }
    let mut out = models[0].zeros_like();
    for (m, w) in models.iter().zip(weights) {
        param_axpy_inplace(*w, m, &mut out)?;
    }
    Ok(out)
}

/// `alpha * teacher + (1 - alpha) * student`, computed as
/// `student + alpha * (teacher - student)` so the fixed point and the
/// `alpha = 0` case are exact.
pub fn ema_update(teacher: &ModelParams, student: &ModelParams, decay: f64) -> Result<ModelParams> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Config("ema decay must be in [0, 1)".into()));
    }
    if !teacher.compatible_with(student) {
        return Err(Error::IncompatibleParams("ema_update".into()));
    }
    let mut out = student.clone();
    for (oe, te) in out.entries_mut().iter_mut().zip(teacher.entries()) {
        for (ov, tv) in oe.values.iter_mut().zip(&te.values) {
            *ov += decay * (tv - *ov);
        }
    }
    Ok(out)
}

/// Teacher outputs cached per (sample, teacher version); the confidence mask
/// is rebuilt from the entropy map whenever the round threshold moves.
struct CachedSignal {
    mean: SoftLabel,
    umap: UncertaintyMap,
    latent: Option<LatentCode>,
}

/// One federated client: private data, an optional teacher replica, and its
/// aggregation weight.
pub struct Client {
    pub id: usize,
    dataset: ClientDataset,
    pub weight: f64,
    teacher: Option<ModelParams>,
    teacher_version: u64,
    cache: BTreeMap<usize, CachedSignal>,
    built: BTreeMap<usize, TeacherSignal>,
}

impl Client {
    fn new(id: usize, dataset: ClientDataset, teacher: Option<ModelParams>, version: u64) -> Self {
        Client {
            id,
            dataset,
            weight: 0.0,
            teacher,
            teacher_version: version,
            cache: BTreeMap::new(),
            built: BTreeMap::new(),
        }
    }

    pub fn teacher(&self) -> Option<&ModelParams> {
        self.teacher.as_ref()
    }

    fn set_teacher(&mut self, teacher: ModelParams) {
        self.teacher = Some(teacher);
        self.teacher_version += 1;
        self.cache.clear();
    }

    fn ensure_signal(
        &mut self,
        idx: usize,
        t: usize,
        fed: &FederationConfig,
        unc: &UncertaintyConfig,
        num_classes: usize,
        want_latent: bool,
    ) -> Result<()> {
        if self.built.contains_key(&idx) {
            return Ok(());
        }
        if !self.cache.contains_key(&idx) {
            let teacher = self.teacher.as_ref().expect("teacher present");
            let vol = &self.dataset.unlabeled[idx];
            let cfg = UncertaintyConfig {
                seed: derive_seed(
                    fed.seed,
                    &[tag::MC_PASS, self.id as u64, idx as u64, self.teacher_version],
                ),
                ..unc.clone()
            };
            let (mean, umap) = mc_teacher_pass(teacher, vol, &cfg)?;
            let latent = if want_latent {
                let (_, latent) = forward(teacher, vol, ForwardMode::Deterministic)?;
                Some(latent)
            } else {
                None
            };
            self.cache.insert(idx, CachedSignal { mean, umap, latent });
        }
        let cached = &self.cache[&idx];
        let thr = entropy_threshold(t, unc, num_classes);
        self.built.insert(
            idx,
            TeacherSignal {
                mean_probs: cached.mean.clone(),
                mask: confidence_mask(&cached.umap, thr),
                latent: cached.latent.clone(),
            },
        );
        Ok(())
    }

    /// `E` iterations of `S_e <- S_{e-1} - eta * grad L` with the variant's
    /// objective, followed by the delayed EMA teacher update.
    pub fn train_locally(
        &mut self,
        student_init: &ModelParams,
        t: usize,
        fed: &FederationConfig,
        weights: &LossWeights,
        unc: &UncertaintyConfig,
    ) -> Result<(ModelParams, LossBreakdown)> {
        if self.dataset.labeled.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "client {} has no labeled data",
                self.id
            )));
        }
        if fed.variant.uses_unlabeled() {
            if self.dataset.unlabeled.is_empty() {
                return Err(Error::EmptyDataset(format!(
                    "client {} has no unlabeled data",
                    self.id
                )));
            }
            if self.teacher.is_none() {
                return Err(Error::Config(format!(
                    "client {} has no teacher replica for variant {}",
                    self.id,
                    fed.variant.name()
                )));
            }
        }
        self.built.clear();
        let num_classes = student_init.config().num_classes;
        let lambda = if fed.variant.uses_unlabeled() {
            lambda_schedule(t, weights)
        } else {
            0.0
        };

        let mut student = student_init.clone();
        let mut mean = LossBreakdown {
            total: 0.0,
            supervised: 0.0,
            response_kd: 0.0,
            feature_kd: 0.0,
            lambda_used: lambda,
            confident_fraction: 0.0,
        };
        for e in 1..=fed.client_iterations {
            let mut rng = derive_rng(
                fed.seed,
                &[tag::BATCH_SAMPLING, self.id as u64, t as u64, e as u64],
            );
            let lab_idx: Vec<usize> = (0..fed.batch_labeled)
                .map(|_| rng.random_range(0..self.dataset.labeled.len()))
                .collect();
            let unl_idx: Vec<usize> = if fed.variant.uses_unlabeled() {
                (0..fed.batch_unlabeled)
                    .map(|_| rng.random_range(0..self.dataset.unlabeled.len()))
                    .collect()
            } else {
                Vec::new()
            };
            for &idx in &unl_idx {
                self.ensure_signal(idx, t, fed, unc, num_classes, fed.variant.uses_feature_kd())?;
            }

            let labeled: Vec<_> = lab_idx
                .iter()
                .map(|&i| (&self.dataset.labeled[i].0, &self.dataset.labeled[i].1))
                .collect();
            let unlabeled: Vec<_> = unl_idx
                .iter()
                .map(|&i| UnlabeledTerm {
                    volume: &self.dataset.unlabeled[i],
                    teacher: &self.built[&i],
                })
                .collect();
            let objective = ObjectiveSpec {
                labeled,
                unlabeled,
                weights: weights.clone(),
                lambda,
                student_mode: ForwardMode::Stochastic {
                    seed: derive_seed(
                        fed.seed,
                        &[tag::STUDENT_PASS, self.id as u64, t as u64, e as u64],
                    ),
                    noise_std: 0.0,
                },
            };
            let (breakdown, grads) =
                loss_and_gradients(&student, &objective).map_err(|err| match err {
                    Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss {
                        round: t,
                        iteration: e,
                        detail: format!("client {}: {detail}", self.id),
                    },
                    other => other,
                })?;
            param_axpy_inplace(-fed.learning_rate, &grads, &mut student)?;

            mean.total += breakdown.total;
            mean.supervised += breakdown.supervised;
            mean.response_kd += breakdown.response_kd;
            mean.feature_kd += breakdown.feature_kd;
            mean.confident_fraction += breakdown.confident_fraction;
        }
        let inv = 1.0 / fed.client_iterations as f64;
        mean.total *= inv;
        mean.supervised *= inv;
        mean.response_kd *= inv;
        mean.feature_kd *= inv;
        mean.confident_fraction *= inv;

        if fed.variant.uses_unlabeled() && !fed.teacher_ema_from_global && t >= fed.ema_start_round
        {
            let updated = ema_update(self.teacher.as_ref().unwrap(), &student, fed.ema_decay)?;
            self.set_teacher(updated);
        }
        Ok((student, mean))
    }

    pub fn evaluate_val(&self, model: &ModelParams) -> Result<Vec<MetricsRow>> {
        metrics::evaluate(model, &self.dataset.val)
    }

    pub fn evaluate_test(&self, model: &ModelParams) -> Result<Vec<MetricsRow>> {
        metrics::evaluate(model, &self.dataset.test)
    }
}

/// Arithmetic mean of per-client metric rows (rows must align by class).
/// ASSD averages over clients where it is defined.
pub fn average_rows(per_client: &[Vec<MetricsRow>]) -> Vec<MetricsRow> {
    let first = &per_client[0];
    let mut out = Vec::with_capacity(first.len());
    for (i, proto) in first.iter().enumerate() {
        let mut dsc = 0.0;
        let mut voe = 0.0;
        let mut assd_sum = 0.0;
        let mut assd_n = 0usize;
        let mut n_cases = 0;
        let mut n_undef = 0;
        for rows in per_client {
            let r = &rows[i];
            dsc += r.dsc;
            voe += r.voe;
            if let Some(a) = r.assd {
                assd_sum += a;
                assd_n += 1;
            }
            n_cases += r.n_cases;
            n_undef += r.n_assd_undefined;
        }
        let n = per_client.len() as f64;
        out.push(MetricsRow {
            class_label: proto.class_label.clone(),
            dsc: dsc / n,
            voe: voe / n,
            assd: (assd_n > 0).then(|| assd_sum / assd_n as f64),
            n_cases,
            n_assd_undefined: n_undef,
        });
    }
    out
}

/// Log of one communication round.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub client_losses: Vec<LossBreakdown>,
    /// Validation metrics of the aggregated model, averaged across clients.
    pub val: Vec<MetricsRow>,
    pub wall_seconds: f64,
}

impl RoundRecord {
    pub fn mean_loss(&self) -> LossBreakdown {
        let n = self.client_losses.len() as f64;
        let mut m = LossBreakdown {
            total: 0.0,
            supervised: 0.0,
            response_kd: 0.0,
            feature_kd: 0.0,
            lambda_used: 0.0,
            confident_fraction: 0.0,
        };
        for b in &self.client_losses {
            m.total += b.total;
            m.supervised += b.supervised;
            m.response_kd += b.response_kd;
            m.feature_kd += b.feature_kd;
            m.lambda_used += b.lambda_used;
            m.confident_fraction += b.confident_fraction;
        }
        m.total /= n;
        m.supervised /= n;
        m.response_kd /= n;
        m.feature_kd /= n;
        m.lambda_used /= n;
        m.confident_fraction /= n;
        m
    }
}

/// Round-completion hook (checkpoint/CSV writing lives in the harness).
pub trait RoundObserver {
    fn on_round(
        &mut self,
        record: &RoundRecord,
        aggregated: &ModelParams,
        teachers: &[Option<&ModelParams>],
    ) -> Result<()>;
}

pub struct NoopObserver;

impl RoundObserver for NoopObserver {
    fn on_round(&mut self, _: &RoundRecord, _: &ModelParams, _: &[Option<&ModelParams>]) -> Result<()> {
        Ok(())
    }
}

/// State captured at the end of a completed round, sufficient to continue
/// the run bit-exactly.
pub struct ResumeState {
    pub completed_round: usize,
    pub student: ModelParams,
    pub teachers: Vec<Option<ModelParams>>,
}

pub struct ServerRun {
    pub final_model: ModelParams,
    pub records: Vec<RoundRecord>,
}

/// Teacher replica version after `completed` rounds (number of EMA updates).
fn teacher_version_after(completed: usize, cfg: &FederationConfig) -> u64 {
    if !cfg.variant.uses_unlabeled() {
        return 0;
    }
    (completed + 1).saturating_sub(cfg.ema_start_round) as u64
}

#[allow(clippy::too_many_arguments)]
pub fn server_run(
    fed: &FederationConfig,
    model_cfg: &ModelConfig,
    weights: &LossWeights,
    unc: &UncertaintyConfig,
    datasets: Vec<ClientDataset>,
    pretrained_teacher: Option<&ModelParams>,
    resume: Option<ResumeState>,
    stop_after_round: Option<usize>,
    observer: &mut dyn RoundObserver,
) -> Result<ServerRun> {
    fed.validate()?;
    model_cfg.validate()?;
    weights.validate()?;
    unc.validate()?;
    if datasets.len() != fed.num_clients {
        return Err(Error::Config(format!(
            "expected {} client datasets, got {}",
            fed.num_clients,
            datasets.len()
        )));
    }
    if fed.variant == Variant::Ours && pretrained_teacher.is_none() {
        return Err(Error::Config(
            "variant=ours requires a pretrained teacher".into(),
        ));
    }

    // "Initialize student model with random weights S_0"
    let init_cfg = ModelConfig {
        seed: derive_seed(fed.seed, &[tag::STUDENT_INIT]),
        ..model_cfg.clone()
    };
    let s0 = init_params(&init_cfg);

    let (start_round, mut global, resume_teachers) = match resume {
        Some(r) => {
            if !r.student.compatible_with(&s0) {
                return Err(Error::IncompatibleParams(
                    "resume checkpoint does not match the model config".into(),
                ));
            }
            (r.completed_round, r.student, Some(r.teachers))
        }
        None => (0, s0.clone(), None),
    };

    // weights p_c
    let total: usize = datasets.iter().map(|d| d.sample_count()).sum();
    let n = datasets.len();
    let p: Vec<f64> = match fed.aggregation {
        Aggregation::Uniform => vec![1.0 / n as f64; n],
        Aggregation::DataSize => {
            if total == 0 {
                vec![1.0 / n as f64; n]
            } else {
                datasets
                    .iter()
                    .map(|d| d.sample_count() as f64 / total as f64)
                    .collect()
            }
        }
    };
    debug_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    // distribute teacher replicas
    let version = teacher_version_after(start_round, fed);
    let mut clients: Vec<Client> = datasets
        .into_iter()
        .enumerate()
        .map(|(id, ds)| {
            let teacher = match fed.variant {
                Variant::Local => None,
                Variant::Ours => Some(pretrained_teacher.unwrap().clone()),
                Variant::Semi => Some(s0.clone()),
            };
            Client::new(id, ds, teacher, version)
        })
        .collect();
    for (c, w) in clients.iter_mut().zip(&p) {
        c.weight = *w;
    }
    if let Some(teachers) = resume_teachers {
        if teachers.len() != clients.len() {
            return Err(Error::Config("resume teacher count mismatch".into()));
        }
        for (c, t) in clients.iter_mut().zip(teachers) {
            c.teacher = t;
        }
    }

    let mut records = Vec::new();
    for t in (start_round + 1)..=fed.rounds {
        let started = std::time::Instant::now();
        let mut locals = Vec::with_capacity(clients.len());
        let mut losses = Vec::with_capacity(clients.len());
        for client in clients.iter_mut() {
            let (params, loss) = client.train_locally(&global, t, fed, weights, unc)?;
            locals.push(params);
            losses.push(loss);
        }
        global = aggregate(&locals, &p)?;

        if fed.variant.uses_unlabeled() && fed.teacher_ema_from_global && t >= fed.ema_start_round
        {
            for client in clients.iter_mut() {
                let updated = ema_update(client.teacher.as_ref().unwrap(), &global, fed.ema_decay)?;
                client.set_teacher(updated);
            }
        }

        let per_client_val: Vec<Vec<MetricsRow>> = clients
            .iter()
            .map(|c| c.evaluate_val(&global))
            .collect::<Result<_>>()?;
        let record = RoundRecord {
            round: t,
            client_losses: losses,
            val: average_rows(&per_client_val),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        let teachers: Vec<Option<&ModelParams>> =
            clients.iter().map(|c| c.teacher.as_ref()).collect();
        observer.on_round(&record, &global, &teachers)?;
        records.push(record);
        if stop_after_round == Some(t) {
            break;
        }
    }

    Ok(ServerRun {
        final_model: global,
        records,
    })
}

/// Test metrics of the final model, averaged across clients (client-side
/// evaluation; only scalar rows cross the boundary).
pub fn evaluate_test_across(
    clients_datasets: &[ClientDataset],
    model: &ModelParams,
) -> Result<Vec<MetricsRow>> {
    let per_client: Vec<Vec<MetricsRow>> = clients_datasets
        .iter()
        .map(|d| metrics::evaluate(model, &d.test))
        .collect::<Result<_>>()?;
    Ok(average_rows(&per_client))
}
