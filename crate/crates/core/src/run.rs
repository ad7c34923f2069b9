//! End-to-end commands: training, evaluation and single-pair inference.

use std::borrow::Cow;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{parse_synthetic_id, DatasetSource, RunConfig};
use crate::data::{generate_synthetic_sequence, load_kitti_sequence, Augmentation, DepthBackend, FramePair, KittiSequence};
use crate::data::synthetic::SyntheticSequence;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_sequence, format_results, plot_trajectory, write_trajectory, SequenceResult};
use crate::flow::DepthMap;
use crate::geometry::{accumulate, Trajectory};
use crate::network::{Inference, Model, PairInput};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::train::{prepare_pair, train_pairs, LogEntry, PairSource, PreparedPair};

pub const CHECKPOINT_FILE: &str = "checkpoint.lvo";
pub const LOG_FILE: &str = "train_log.txt";
pub const RESULTS_FILE: &str = "results.txt";

/// One opened sequence of either dataset.
#[derive(Debug, Clone)]
pub enum Sequence {
    Synthetic { id: String, data: Box<SyntheticSequence> },
    Kitti(KittiSequence),
}

impl Sequence {
    pub fn open(cfg: &RunConfig, id: &str) -> Result<Self> {
        match &cfg.dataset {
            DatasetSource::Synthetic { scene, .. } => Ok(Sequence::Synthetic {
                id: id.to_string(),
                data: Box::new(generate_synthetic_sequence(scene, parse_synthetic_id(id)?)?),
            }),
            DatasetSource::Kitti { root, options, .. } => Ok(Sequence::Kitti(load_kitti_sequence(root, id, options)?)),
        }
    }

    pub fn id(&self) -> &str {
        match self {
            Sequence::Synthetic { id, .. } => id,
            Sequence::Kitti(k) => &k.id,
        }
    }

    pub fn pair_count(&self) -> usize {
        match self {
            Sequence::Synthetic { data, .. } => data.pair_count(),
            Sequence::Kitti(k) => k.pair_count(),
        }
    }

    pub fn pair(&self, i: usize) -> Result<FramePair> {
        match self {
            Sequence::Synthetic { data, .. } => data.pair(i),
            Sequence::Kitti(k) => k.pair(i),
        }
    }

    pub fn ground_truth(&self) -> Result<Trajectory> {
        match self {
            Sequence::Synthetic { data, .. } => Trajectory::new(data.poses.clone()),
            Sequence::Kitti(k) => Trajectory::new(k.poses.clone()),
        }
    }
}

/// Loads and prepares training pairs on demand, applying augmentation with a
/// generator seeded from the run seed and the iteration.
pub struct StreamingPairs {
    sequences: Vec<Sequence>,
    index: Vec<(usize, usize)>,
    backend: DepthBackend,
    use_depth: bool,
    augmentation: Augmentation,
    seed: u64,
}

impl StreamingPairs {
    pub fn new(sequences: Vec<Sequence>, backend: DepthBackend, use_depth: bool, augmentation: Augmentation, seed: u64) -> Self {
        let index = sequences
            .iter()
            .enumerate()
            .flat_map(|(s, seq)| (0..seq.pair_count()).map(move |i| (s, i)))
            .collect();
        Self {
            sequences,
            index,
            backend,
            use_depth,
            augmentation,
            seed,
        }
    }
}

impl PairSource for StreamingPairs {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn get(&self, index: usize, iteration: usize) -> Result<Cow<'_, PreparedPair>> {
        let (s, i) = self.index[index];
        let seq = &self.sequences[s];
        let mut pair = seq.pair(i)?;
        if !self.augmentation.is_identity() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed.rotate_left(17) ^ (iteration as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
            pair = self.augmentation.apply(&pair, &mut rng)?;
        }
        Ok(Cow::Owned(prepare_pair(&pair, seq.id(), &self.backend, self.use_depth)?))
    }
}

/// Freshly initialized model with the configured loss balance start values.
pub fn init_model(cfg: &RunConfig) -> Result<(Model, ParamStore)> {
    let (model, mut store) = Model::new(cfg.model.clone(), cfg.seed)?;
    *store.value_mut(model.s_t) = Tensor::scalar(cfg.loss.s_t);
    *store.value_mut(model.s_q) = Tensor::scalar(cfg.loss.s_q);
    Ok((model, store))
}

pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(Model, ParamStore)> {
    let (model, mut store) = init_model(cfg)?;
    Checkpoint::load(checkpoint)?.restore(&mut store, cfg.model_hash())?;
    Ok((model, store))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LogEntry>,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub model: Model,
    pub store: ParamStore,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Trains on the configured sequences and writes the loss log, a copy of the
/// configuration and the final checkpoint into the output directory.
pub fn train(cfg: &RunConfig, mut on_log: impl FnMut(&LogEntry)) -> Result<TrainOutcome> {
    cfg.validate()?;
    create_dir(&cfg.output_dir)?;
    cfg.save(&cfg.output_dir.join("config.toml"))?;
    let sequences = cfg
        .dataset
        .train_sequences()
        .iter()
        .map(|id| Sequence::open(cfg, id))
        .collect::<Result<Vec<_>>>()?;
    let source = StreamingPairs::new(sequences, cfg.depth_backend.clone(), cfg.model.use_depth, cfg.augmentation.clone(), cfg.seed);
    let (model, mut store) = init_model(cfg)?;
    let log_path = cfg.output_dir.join(LOG_FILE);
    let mut text = String::new();
    let log = train_pairs(&model, &mut store, &source, &cfg.optimizer, &cfg.loss.alpha, cfg.seed, |e| {
        text.push_str(&e.line());
        text.push('\n');
        on_log(e);
    })?;
    std::fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
    let checkpoint = cfg.output_dir.join(CHECKPOINT_FILE);
    Checkpoint::from_store(&store, cfg.model_hash()).save(&checkpoint)?;
    Ok(TrainOutcome {
        log,
        checkpoint,
        log_path,
        model,
        store,
    })
}

/// Chains fused relative-pose predictions from the ground-truth first pose.
pub fn predict_trajectory(model: &Model, store: &ParamStore, seq: &Sequence, backend: &DepthBackend) -> Result<Trajectory> {
    let mut rel = Vec::with_capacity(seq.pair_count());
    for i in 0..seq.pair_count() {
        let p = prepare_pair(&seq.pair(i)?, seq.id(), backend, model.config.use_depth)?;
        rel.push(model.infer(store, &p.input)?.fused);
    }
    let origin = seq.ground_truth()?.poses()[0];
    accumulate(&rel, origin)
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub results: Vec<SequenceResult>,
    pub results_path: PathBuf,
}

/// Evaluates `sequences` (the configured evaluation set when empty) and
/// writes `results.txt`, `pred_<id>.txt` and `traj_<id>.png/.txt`.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, sequences: &[String]) -> Result<EvalOutcome> {
    cfg.validate()?;
    let (model, store) = load_model(cfg, checkpoint)?;
    let ids = if sequences.is_empty() { cfg.dataset.eval_sequences() } else { sequences };
    if ids.is_empty() {
        return Err(Error::Config("no evaluation sequences".into()));
    }
    create_dir(&cfg.output_dir)?;
    let mut results = Vec::with_capacity(ids.len());
    for id in ids {
        let seq = Sequence::open(cfg, id)?;
        let gt = seq.ground_truth()?;
        let pred = predict_trajectory(&model, &store, &seq, &cfg.depth_backend)?;
        write_trajectory(&pred, &cfg.output_dir.join(format!("pred_{id}.txt")))?;
        let res = evaluate_sequence(id, &gt, &pred, &cfg.eval_lengths)?;
        plot_trajectory(&gt, &[("prediction".to_string(), pred)], std::slice::from_ref(&res), &cfg.output_dir.join(format!("traj_{id}.png")))?;
        results.push(res);
    }
    let results_path = cfg.output_dir.join(RESULTS_FILE);
    std::fs::write(&results_path, format_results(&results)).map_err(|e| Error::io(&results_path, e))?;
    Ok(EvalOutcome { results, results_path })
}

/// Runs the model on two RGB-D frames given as image tensors and dense depth.
pub fn infer_frames(model: &Model, store: &ParamStore, rgb: (&Tensor, &Tensor), depth: (&DepthMap, &DepthMap)) -> Result<Inference> {
    let input = PairInput::new(rgb.0, depth.0, rgb.1, depth.1, model.config.use_depth)?;
    model.infer(store, &input)
}

/// Relative pose `b` in `a` from a trained model, with depth completed by the
/// configured backend when `depth` holds sparse maps.
pub fn infer_pair(cfg: &RunConfig, model: &Model, store: &ParamStore, rgb: (&Tensor, &Tensor), depth: (&DepthMap, &DepthMap)) -> Result<Inference> {
    let complete = |d: &DepthMap, rgb: &Tensor, key: &str| -> Result<DepthMap> {
        if d.is_dense() {
            Ok(d.clone())
        } else {
            crate::data::complete_depth(d, rgb, &cfg.depth_backend, key)
        }
    };
    let da = complete(depth.0, rgb.0, "a")?;
    let db = complete(depth.1, rgb.1, "b")?;
    infer_frames(model, store, rgb, (&da, &db))
}
