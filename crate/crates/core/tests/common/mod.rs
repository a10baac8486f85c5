#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taxogrow::corpus::{collect_triples, Triple};
use taxogrow::graph::TopicGraph;
use taxogrow::nn::{AdamConfig, Tape, Tensor, Var};
use taxogrow::trainer::{batch_loss, target_graphs};
use taxogrow::{Corpus, Model, ModelConfig, Result, Taxonomy, TrainConfig, WordVectors};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Retry step for entries whose central difference straddles a rectifier kink.
pub const FD_REFINED_STEP: f64 = 1e-6;
/// Denominator floor for relative errors, so gradients that are zero up to
/// round-off do not divide by noise.
pub const REL_FLOOR: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries that needed the refined step.
    pub refined: usize,
    /// Location, analytic and numeric value of the worst entry.
    pub worst: Option<(String, f64, f64)>,
}

impl GradReport {
    pub fn merge(self, other: GradReport) -> GradReport {
        let (checked, refined) = (self.checked + other.checked, self.refined + other.refined);
        let mut best = if other.max_rel_err > self.max_rel_err { other } else { self };
        best.checked = checked;
        best.refined = refined;
        best
    }

    /// Records one entry; `numeric(h)` is the central difference with step `h`.
    fn record(&mut self, at: impl FnOnce() -> String, analytic: f64, mut numeric: impl FnMut(f64) -> f64) {
        let mut n = numeric(FD_STEP);
        let mut e = rel_err(analytic, n);
        if e >= GRAD_TOL {
            n = numeric(FD_REFINED_STEP);
            e = rel_err(analytic, n);
            self.refined += 1;
        }
        let numeric = n;
        if e > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = Some((at(), analytic, numeric));
        }
        self.checked += 1;
    }

    pub fn ok(&self) -> bool {
        self.checked > 0 && self.max_rel_err < GRAD_TOL
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Fixed projection weights turning any output into a scalar that depends on every entry.
fn projection(shape: [usize; 2]) -> Tensor {
    let mut r = rng(0x5eed);
    random_tensor(&mut r, shape[0], shape[1], 1.0)
}

fn scalarize<'t>(tape: &'t Tape, out: Var<'t>) -> Result<Var<'t>> {
    if out.shape() == [1, 1] {
        return Ok(out);
    }
    let w = tape.constant(projection(out.shape()));
    Ok(out.mul(w)?.sum())
}

/// Checks reverse-mode gradients of `f` with respect to every entry of every
/// input against central finite differences.
pub fn check_leaf_grads<F>(inputs: &[Tensor], f: F) -> GradReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |values: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&tape, &vars).unwrap();
        scalarize(&tape, out).unwrap().item()
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = scalarize(&tape, f(&tape, &vars).unwrap()).unwrap();
    let grads = tape.backward(out);
    let mut report = GradReport::default();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));
        for k in 0..input.len() {
            let numeric = |h: f64| {
                let mut values = inputs.to_vec();
                values[i].data_mut()[k] += h;
                let plus = eval(&values);
                values[i].data_mut()[k] -= 2.0 * h;
                let minus = eval(&values);
                (plus - minus) / (2.0 * h)
            };
            report.record(|| format!("input {i}[{k}]"), analytic.data()[k], numeric);
        }
    }
    report
}

/// Checks parameter gradients of a scalar model loss against central finite
/// differences. Returns the report and the names of parameters that received
/// no gradient entry.
pub fn check_param_grads<F>(model: &Model, loss: F) -> (GradReport, Vec<String>)
where
    F: for<'t> Fn(&'t Tape, &Model) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let out = loss(&tape, model).unwrap();
    let grads: BTreeMap<usize, Tensor> = tape.backward(out).into_params().into_iter().collect();
    let mut report = GradReport::default();
    let mut missing = Vec::new();
    let mut probe = model.clone();
    for i in 0..model.params.len() {
        let Some(analytic) = grads.get(&i) else {
            missing.push(model.params.name(i).to_string());
            continue;
        };
        for k in 0..analytic.len() {
            let base = model.params.value(i).data()[k];
            let numeric = |h: f64| {
                probe.params.value_mut(i).data_mut()[k] = base + h;
                let plus = loss(&Tape::inference(), &probe).unwrap().item();
                probe.params.value_mut(i).data_mut()[k] = base - h;
                let minus = loss(&Tape::inference(), &probe).unwrap().item();
                probe.params.value_mut(i).data_mut()[k] = base;
                (plus - minus) / (2.0 * h)
            };
            report.record(|| format!("{}[{k}]", model.params.name(i)), analytic.data()[k], numeric);
        }
    }
    (report, missing)
}

/// Two-topic micro problem: vocabulary of 12 ids (4 reserved), 8-dimensional
/// vectors, one triple per topic.
pub struct Micro {
    pub taxonomy: Taxonomy,
    pub corpus: Corpus,
    pub vectors: WordVectors,
    pub triples: Vec<Triple>,
    pub graphs: BTreeMap<u32, TopicGraph>,
}

pub const MICRO_DIM: usize = 8;

pub fn micro() -> Micro {
    let taxonomy = Taxonomy::read_from(
        [
            r#"{"id": 0, "parent_id": null, "name": "root", "terms": []}"#,
            r#"{"id": 1, "parent_id": 0, "name": "fruit", "terms": ["green pear", "apple"]}"#,
            r#"{"id": 2, "parent_id": 0, "name": "weather", "terms": ["blue sky", "rain"]}"#,
        ]
        .join("\n")
        .as_bytes(),
    )
    .unwrap();
    let corpus = Corpus::build(["red apple green pear sky", "blue sky cloud rain red"], 16).unwrap();
    assert_eq!(corpus.vocab.len(), 12);
    let mut r = rng(11);
    let mut vectors = WordVectors::new(MICRO_DIM);
    for w in ["red", "apple", "green", "pear", "sky", "blue", "cloud", "rain"] {
        vectors.insert(w, random_tensor(&mut r, 1, MICRO_DIM, 1.0).into_data()).unwrap();
    }
    // one triple per topic: the first term found in each document
    let mut triples: Vec<Triple> = Vec::new();
    for t in collect_triples(&taxonomy, &corpus, 4) {
        if !triples.iter().any(|x| x.topic_id == t.topic_id) {
            triples.push(t);
        }
    }
    assert_eq!(triples.len(), 2);
    let graphs = target_graphs(&taxonomy, &vectors, [1, 2]).unwrap();
    Micro {
        taxonomy,
        corpus,
        vectors,
        triples,
        graphs,
    }
}

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        topic_dim: MICRO_DIM,
        doc_dim: MICRO_DIM,
        decoder_heads: 2,
        decoder_ff: 16,
        max_phrase_len: 4,
        max_doc_len: 16,
        ..ModelConfig::default()
    }
}

/// Total training loss `L_sim + L_gen` of the micro batch.
pub fn micro_loss<'t>(tape: &'t Tape, model: &Model, m: &Micro, gamma: f64) -> Result<Var<'t>> {
    Ok(batch_loss(tape, model, &m.corpus, &m.graphs, &m.triples, gamma, 1.0)?.total)
}

/// Desk-scale model for the synthetic fixture.
pub fn desk_model_config(vocab_size: usize, topic_dim: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        topic_dim,
        doc_dim: 32,
        decoder_heads: 4,
        decoder_ff: 64,
        max_doc_len: 64,
        ..ModelConfig::default()
    }
}

/// Desk-scale optimization: the fixture is tiny, so the learning rate is
/// larger and batches smaller than the full-corpus recipe.
pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        max_epochs: 200,
        patience: 20,
        adam: AdamConfig {
            lr: 5e-3,
            ..AdamConfig::default()
        },
        seed,
        skip_val_acc: true,
        ..TrainConfig::default()
    }
}
