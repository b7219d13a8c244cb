//! Alternating-minimization training loop.
//!
//! One outer iteration, in order:
//!
//! 1. sample a fresh query set (similarity rows against the database),
//! 2. `t_in` rounds of mini-batch SGD, each round one image-encoder epoch
//!    followed by one text-encoder epoch,
//! 3. recompute both encoders' outputs on all query rows,
//! 4. one full discrete coordinate-descent sweep over the code columns,
//! 5. the closed-form ridge solve for the code classifier,
//! 6. log the objective (after the classifier step).
//!
//! The code sweep and the classifier solve are exact block minimizers at
//! fixed encoder outputs, so [`outer_iteration`] asserts — on every
//! iteration, in every build — that neither step increased the full
//! objective (up to a relative slack of `1e-9` for float round-off).
//!
//! All randomness derives from one master seed through [`derive_seed`]:
//! disjoint streams cover the two encoder initializations, the code
//! initialization, per-iteration query sampling and per-epoch batch
//! shuffling. A checkpoint therefore only needs the master seed and the
//! number of completed iterations to resume bit-for-bit onto the
//! trajectory of an uninterrupted run.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_query_set, Dataset, SimilarityView};
use crate::encoder::{backward, forward, hash_mlp, MlpParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::objective::{eval_objective, grad_t, grad_v, HyperParams, LossBreakdown};
use crate::solver::{build_d_matrix, solve_w, update_b, CodeMatrix, MaskedOutputs};

/// Seed-stream tags. Each (stream, index) pair maps to an independent
/// sub-seed of the master seed via [`derive_seed`]. Public because they
/// are part of the reproducibility contract: an external replay of a run
/// needs the same derived seeds step for step.
pub const STREAM_THETA_INIT: u64 = 1;
pub const STREAM_PSI_INIT: u64 = 2;
pub const STREAM_B_INIT: u64 = 3;
pub const STREAM_PHI: u64 = 4;
pub const STREAM_IMG_BATCH: u64 = 5;
pub const STREAM_TXT_BATCH: u64 = 6;

/// File names inside a checkpoint directory.
pub const THETA_FILE: &str = "theta.bin";
pub const PSI_FILE: &str = "psi.bin";
pub const CODES_FILE: &str = "codes.bin";
pub const W_FILE: &str = "w.bin";
pub const LOG_FILE: &str = "train_log.json";
pub const META_FILE: &str = "meta.json";

/// Mix a (stream, index) pair into the master seed with the splitmix64
/// finalizer. Used for every RNG the trainer creates, so that resuming at
/// iteration `i` sees exactly the seeds an uninterrupted run would.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything the trainer updates: the two hash encoders, the database
/// codes, the code classifier, and the master seed all randomness derives
/// from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// Image hash encoder.
    pub theta: MlpParams,
    /// Text hash encoder.
    pub psi: MlpParams,
    /// Unified database codes, n x k.
    pub b: CodeMatrix,
    /// Code classifier, k x c.
    pub w: Matrix,
    /// Master seed; together with the number of completed iterations this
    /// is the full generator state of the run.
    pub master_seed: u64,
}

/// One completed outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    /// Objective breakdown evaluated after the classifier step.
    pub objective: LossBreakdown,
    /// Wall-clock seconds for the iteration. The only non-deterministic
    /// field; comparisons and byte-level determinism checks exclude it.
    pub elapsed_secs: f64,
    /// Seed that drew this iteration's query set.
    pub phi_seed: u64,
}

/// Per-iteration training history, one record per completed outer
/// iteration. Its length doubles as the resume point for checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<IterRecord>,
}

impl TrainLog {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("log serialization cannot fail");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::parse(format!("train log {}", path.display()), e.to_string()))
    }

    /// Structural equality modulo the wall-clock field.
    pub fn matches_ignoring_time(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.iteration == b.iteration
                    && a.objective == b.objective
                    && a.phi_seed == b.phi_seed
            })
    }
}

/// Checkpoint sidecar: enough to validate the files and resume training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub master_seed: u64,
    /// Number of completed outer iterations at save time.
    pub completed: usize,
    pub hp: HyperParams,
}

/// Relative slack for the block-minimizer monotonicity asserts.
fn objective_slack(reference: f64) -> f64 {
    1e-9 * (1.0 + reference.abs())
}

/// Fresh model state: Xavier-initialized encoders, i.i.d. uniform +/-1
/// codes (zero-centered by construction), zero classifier.
///
/// Precondition: `hp` validates against the dataset.
pub fn init_state(dataset: &Dataset, hp: &HyperParams, seed: u64) -> ModelState {
    let theta = hash_mlp(
        dataset.d_x(),
        hp.hidden_img,
        hp.k,
        derive_seed(seed, STREAM_THETA_INIT, 0),
    );
    let psi = hash_mlp(
        dataset.d_y(),
        hp.hidden_txt,
        hp.k,
        derive_seed(seed, STREAM_PSI_INIT, 0),
    );
    let b = CodeMatrix::random(dataset.n(), hp.k, derive_seed(seed, STREAM_B_INIT, 0));
    let w = Matrix::zeros(hp.k, dataset.c());
    ModelState {
        theta,
        psi,
        b,
        w,
        master_seed: seed,
    }
}

/// One epoch of mini-batch SGD on the image encoder. Batches are a seeded
/// permutation of the query rows (the last batch may be short); the text
/// outputs, codes and classifier are held fixed throughout. Per-row
/// objective gradients are averaged over the batch before
/// backpropagation, the usual mini-batch convention, which keeps the
/// step size independent of the batch size.
pub fn train_epoch_image(
    state: &mut ModelState,
    dataset: &Dataset,
    sim: &SimilarityView,
    hp: &HyperParams,
    epoch_seed: u64,
) {
    let phi = sim.query_index();
    let m = phi.len();
    let labels = dataset.labels_matrix();
    let x_phi = dataset.image_matrix(phi);
    // Text outputs on all query rows, fixed for the whole epoch.
    let (t_fixed, _) = forward(&state.psi, &dataset.text_matrix(phi));
    // Scratch image outputs; each batch refreshes its own rows before the
    // per-row gradients read them.
    let mut v_scratch = forward(&state.theta, &x_phi).0;

    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(epoch_seed));

    for batch in order.chunks(hp.batch) {
        let x_batch = Matrix::from_fn(batch.len(), dataset.d_x(), |r, c| x_phi[(batch[r], c)]);
        let (out, trace) = forward(&state.theta, &x_batch);
        for (r, &row) in batch.iter().enumerate() {
            v_scratch.row_mut(row).copy_from_slice(out.row(r));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut out_grad = Matrix::zeros(batch.len(), hp.k);
        for (r, &row) in batch.iter().enumerate() {
            let g = grad_v(
                row,
                &v_scratch,
                &t_fixed,
                state.b.real(),
                &state.w,
                sim,
                &labels,
                hp,
            );
            for (dst, src) in out_grad.row_mut(r).iter_mut().zip(&g) {
                *dst = scale * src;
            }
        }
        let grads = backward(&state.theta, &trace, &out_grad);
        state.theta.sgd_step(&grads, hp.lr_img);
    }
}

/// One epoch of mini-batch SGD on the text encoder; mirror of
/// [`train_epoch_image`] with the image outputs held fixed.
pub fn train_epoch_text(
    state: &mut ModelState,
    dataset: &Dataset,
    sim: &SimilarityView,
    hp: &HyperParams,
    epoch_seed: u64,
) {
    let phi = sim.query_index();
    let m = phi.len();
    let labels = dataset.labels_matrix();
    let y_phi = dataset.text_matrix(phi);
    let (v_fixed, _) = forward(&state.theta, &dataset.image_matrix(phi));
    let mut t_scratch = forward(&state.psi, &y_phi).0;

    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(epoch_seed));

    for batch in order.chunks(hp.batch) {
        let y_batch = Matrix::from_fn(batch.len(), dataset.d_y(), |r, c| y_phi[(batch[r], c)]);
        let (out, trace) = forward(&state.psi, &y_batch);
        for (r, &row) in batch.iter().enumerate() {
            t_scratch.row_mut(row).copy_from_slice(out.row(r));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut out_grad = Matrix::zeros(batch.len(), hp.k);
        for (r, &row) in batch.iter().enumerate() {
            let g = grad_t(
                row,
                &v_fixed,
                &t_scratch,
                state.b.real(),
                &state.w,
                sim,
                &labels,
                hp,
            );
            for (dst, src) in out_grad.row_mut(r).iter_mut().zip(&g) {
                *dst = scale * src;
            }
        }
        let grads = backward(&state.psi, &trace, &out_grad);
        state.psi.sgd_step(&grads, hp.lr_txt);
    }
}

/// Run one full outer iteration and return its log record. Asserts that
/// the code sweep and the classifier solve did not increase the objective.
pub fn outer_iteration(
    state: &mut ModelState,
    dataset: &Dataset,
    hp: &HyperParams,
    iter_index: usize,
) -> Result<IterRecord> {
    let start = Instant::now();
    let phi_seed = derive_seed(state.master_seed, STREAM_PHI, iter_index as u64);
    let sim = sample_query_set(dataset, hp.m, phi_seed);

    for inner in 0..hp.t_in {
        let idx = (iter_index * hp.t_in + inner) as u64;
        train_epoch_image(
            state,
            dataset,
            &sim,
            hp,
            derive_seed(state.master_seed, STREAM_IMG_BATCH, idx),
        );
        train_epoch_text(
            state,
            dataset,
            &sim,
            hp,
            derive_seed(state.master_seed, STREAM_TXT_BATCH, idx),
        );
    }

    // Final encoder outputs on all query rows for the discrete steps.
    let (v, _) = forward(&state.theta, &dataset.image_matrix(sim.query_index()));
    let (t, _) = forward(&state.psi, &dataset.text_matrix(sim.query_index()));
    let labels = dataset.labels_matrix();
    let masked = MaskedOutputs::new(&v, &t, sim.query_index(), dataset.n());

    let before_b = eval_objective(&v, &t, state.b.real(), &state.w, &sim, &labels, hp);
    let d = build_d_matrix(&v, &t, &masked, &state.w, &labels, &sim, hp);
    update_b(&mut state.b, &v, &t, &state.w, &d, &sim, hp);
    let after_b = eval_objective(&v, &t, state.b.real(), &state.w, &sim, &labels, hp);
    assert!(
        after_b.total <= before_b.total + objective_slack(before_b.total),
        "code sweep increased the objective: {} -> {}",
        before_b.total,
        after_b.total,
    );

    state.w = solve_w(&v, &t, &masked, &state.b, &labels, hp)?;
    let after_w = eval_objective(&v, &t, state.b.real(), &state.w, &sim, &labels, hp);
    assert!(
        after_w.total <= after_b.total + objective_slack(after_b.total),
        "classifier solve increased the objective: {} -> {}",
        after_b.total,
        after_w.total,
    );

    Ok(IterRecord {
        iteration: iter_index,
        objective: after_w,
        elapsed_secs: start.elapsed().as_secs_f64(),
        phi_seed,
    })
}

/// Run outer iterations `log.records.len()..hp.t_out`, appending one
/// record each. A checkpointed run resumes by calling this with the
/// restored state and log.
pub fn resume_training(
    state: &mut ModelState,
    log: &mut TrainLog,
    dataset: &Dataset,
    hp: &HyperParams,
) -> Result<()> {
    hp.validate(dataset.n())?;
    for iter_index in log.records.len()..hp.t_out {
        let record = outer_iteration(state, dataset, hp, iter_index)?;
        log::info!(
            "iteration {}: objective {:.6} ({:.2}s)",
            record.iteration,
            record.objective.total,
            record.elapsed_secs,
        );
        log.records.push(record);
    }
    Ok(())
}

/// Full training run from a fresh state: `t_out` outer iterations.
pub fn train(dataset: &Dataset, hp: &HyperParams, seed: u64) -> Result<(ModelState, TrainLog)> {
    hp.validate(dataset.n())?;
    let mut state = init_state(dataset, hp, seed);
    let mut log = TrainLog::default();
    resume_training(&mut state, &mut log, dataset, hp)?;
    Ok((state, log))
}

/// Write a checkpoint directory: both encoders, the codes, the classifier,
/// the train log and a metadata sidecar.
pub fn save_checkpoint(
    dir: &Path,
    state: &ModelState,
    log: &TrainLog,
    hp: &HyperParams,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    state.theta.save(&dir.join(THETA_FILE))?;
    state.psi.save(&dir.join(PSI_FILE))?;
    state.b.save(&dir.join(CODES_FILE))?;
    state.w.save(&dir.join(W_FILE))?;
    log.save(&dir.join(LOG_FILE))?;
    let meta = CheckpointMeta {
        master_seed: state.master_seed,
        completed: log.records.len(),
        hp: hp.clone(),
    };
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).expect("meta serialization cannot fail");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a checkpoint directory back. Cross-checks the log length against
/// the recorded iteration count and the stored widths against the
/// hyper-parameters.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelState, TrainLog, HyperParams)> {
    let meta_path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&meta_path)
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| Error::parse(format!("checkpoint meta {}", meta_path.display()), e.to_string()))?;

    let theta = MlpParams::load(&dir.join(THETA_FILE))?;
    let psi = MlpParams::load(&dir.join(PSI_FILE))?;
    let b = CodeMatrix::load(&dir.join(CODES_FILE))?;
    let w = Matrix::load(&dir.join(W_FILE))?;
    let log = TrainLog::load(&dir.join(LOG_FILE))?;

    if log.records.len() != meta.completed {
        return Err(Error::parse(
            format!("checkpoint {}", dir.display()),
            format!(
                "log has {} records but metadata says {} iterations completed",
                log.records.len(),
                meta.completed
            ),
        ));
    }
    let k = meta.hp.k;
    for (name, width) in [
        ("image encoder output", theta.out_dim()),
        ("text encoder output", psi.out_dim()),
        ("code", b.k()),
        ("classifier rows", w.rows()),
    ] {
        if width != k {
            return Err(Error::parse(
                format!("checkpoint {}", dir.display()),
                format!("{name} width {width} does not match k = {k}"),
            ));
        }
    }

    let state = ModelState {
        theta,
        psi,
        b,
        w,
        master_seed: meta.master_seed,
    };
    Ok((state, log, meta.hp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    /// Small dataset most trainer tests share.
    fn tiny_dataset() -> Dataset {
        generate(&SynthSpec {
            clusters: 2,
            per_cluster: 6,
            d_x: 4,
            d_y: 4,
            noise: 0.1,
            mix_prob: 0.0,
            seed: 7,
        })
    }

    fn tiny_hp() -> HyperParams {
        HyperParams {
            k: 4,
            m: 8,
            t_out: 3,
            t_in: 2,
            batch: 4,
            hidden_img: 8,
            hidden_txt: 8,
            ..Default::default()
        }
    }

    #[test]
    fn derived_seeds_are_deterministic_and_distinct() {
        assert_eq!(derive_seed(42, 1, 0), derive_seed(42, 1, 0));
        let seeds = [
            derive_seed(42, STREAM_PHI, 0),
            derive_seed(42, STREAM_PHI, 1),
            derive_seed(42, STREAM_IMG_BATCH, 0),
            derive_seed(42, STREAM_TXT_BATCH, 0),
            derive_seed(43, STREAM_PHI, 0),
        ];
        for i in 0..seeds.len() {
            for j in (i + 1)..seeds.len() {
                assert_ne!(seeds[i], seeds[j], "streams {i} and {j} collide");
            }
        }
    }

    #[test]
    fn init_state_is_deterministic_with_zero_classifier() {
        let ds = tiny_dataset();
        let hp = tiny_hp();
        let a = init_state(&ds, &hp, 5);
        let b = init_state(&ds, &hp, 5);
        assert_eq!(a, b);
        assert_ne!(a, init_state(&ds, &hp, 6));
        assert_eq!(a.w, Matrix::zeros(hp.k, ds.c()));
        assert_eq!(a.b.n(), ds.n());
        assert_eq!(a.theta.in_dim(), ds.d_x());
        assert_eq!(a.psi.in_dim(), ds.d_y());
    }

    #[test]
    fn initial_code_columns_are_zero_centered() {
        // Column means of B over 10^4 rows stay within 3/sqrt(n) — three
        // standard errors of the mean of i.i.d. uniform +/-1 entries.
        let ds = generate(&SynthSpec {
            clusters: 2,
            per_cluster: 5_000,
            d_x: 2,
            d_y: 2,
            noise: 0.1,
            mix_prob: 0.0,
            seed: 3,
        });
        let hp = HyperParams {
            k: 8,
            ..Default::default()
        };
        let state = init_state(&ds, &hp, 11);
        let n = ds.n() as f64;
        for q in 0..hp.k {
            let mean: f64 = (0..ds.n()).map(|i| state.b.get(i, q)).sum::<f64>() / n;
            assert!(
                mean.abs() <= 3.0 / n.sqrt(),
                "column {q} mean {mean} beyond the statistical bound"
            );
        }
    }

    #[test]
    fn zero_learning_rate_leaves_encoders_unchanged() {
        let ds = tiny_dataset();
        let hp = HyperParams {
            lr_img: 0.0,
            lr_txt: 0.0,
            ..tiny_hp()
        };
        let mut state = init_state(&ds, &hp, 1);
        let before = state.clone();
        let sim = sample_query_set(&ds, hp.m, 99);
        train_epoch_image(&mut state, &ds, &sim, &hp, 5);
        train_epoch_text(&mut state, &ds, &sim, &hp, 6);
        assert_eq!(state, before);
    }

    #[test]
    fn single_row_image_epoch_matches_hand_composed_step() {
        let ds = tiny_dataset();
        let hp = HyperParams {
            m: 1,
            batch: 1,
            ..tiny_hp()
        };
        let mut state = init_state(&ds, &hp, 2);
        let sim = sample_query_set(&ds, 1, 17);
        let phi = sim.query_index();

        // Hand-composed step: forward, per-row gradient, backward, SGD.
        let labels = ds.labels_matrix();
        let (t_fixed, _) = forward(&state.psi, &ds.text_matrix(phi));
        let (v, trace) = forward(&state.theta, &ds.image_matrix(phi));
        let g = grad_v(
            0,
            &v,
            &t_fixed,
            state.b.real(),
            &state.w,
            &sim,
            &labels,
            &hp,
        );
        let mut out_grad = Matrix::zeros(1, hp.k);
        out_grad.row_mut(0).copy_from_slice(&g);
        let grads = backward(&state.theta, &trace, &out_grad);
        let mut expected = state.theta.clone();
        expected.sgd_step(&grads, hp.lr_img);

        train_epoch_image(&mut state, &ds, &sim, &hp, 5);
        assert_eq!(state.theta, expected);
    }

    #[test]
    fn single_row_text_epoch_matches_hand_composed_step() {
        let ds = tiny_dataset();
        let hp = HyperParams {
            m: 1,
            batch: 1,
            ..tiny_hp()
        };
        let mut state = init_state(&ds, &hp, 2);
        let sim = sample_query_set(&ds, 1, 23);
        let phi = sim.query_index();

        let labels = ds.labels_matrix();
        let (v_fixed, _) = forward(&state.theta, &ds.image_matrix(phi));
        let (t, trace) = forward(&state.psi, &ds.text_matrix(phi));
        let g = grad_t(
            0,
            &v_fixed,
            &t,
            state.b.real(),
            &state.w,
            &sim,
            &labels,
            &hp,
        );
        let mut out_grad = Matrix::zeros(1, hp.k);
        out_grad.row_mut(0).copy_from_slice(&g);
        let grads = backward(&state.psi, &trace, &out_grad);
        let mut expected = state.psi.clone();
        expected.sgd_step(&grads, hp.lr_txt);

        train_epoch_text(&mut state, &ds, &sim, &hp, 6);
        assert_eq!(state.psi, expected);
    }

    /// Sampled objective at the current encoder outputs, everything else
    /// taken from the state.
    fn sampled_total(
        state: &ModelState,
        ds: &Dataset,
        sim: &SimilarityView,
        hp: &HyperParams,
    ) -> f64 {
        let (v, _) = forward(&state.theta, &ds.image_matrix(sim.query_index()));
        let (t, _) = forward(&state.psi, &ds.text_matrix(sim.query_index()));
        eval_objective(&v, &t, state.b.real(), &state.w, sim, &ds.labels_matrix(), hp).total
    }

    #[test]
    fn image_epochs_descend_on_separable_instance() {
        let ds = tiny_dataset();
        let hp = HyperParams {
            m: 12,
            lr_img: 1e-4,
            ..tiny_hp()
        };
        let mut state = init_state(&ds, &hp, 4);
        let sim = sample_query_set(&ds, hp.m, 31);
        let before = sampled_total(&state, &ds, &sim, &hp);
        for epoch in 0..50 {
            train_epoch_image(&mut state, &ds, &sim, &hp, 1000 + epoch);
        }
        let after = sampled_total(&state, &ds, &sim, &hp);
        assert!(
            after < before,
            "image-encoder terms did not descend: {before} -> {after}"
        );
    }

    #[test]
    fn text_epochs_descend_on_separable_instance() {
        let ds = tiny_dataset();
        let hp = HyperParams {
            m: 12,
            lr_txt: 1e-3,
            ..tiny_hp()
        };
        let mut state = init_state(&ds, &hp, 4);
        let sim = sample_query_set(&ds, hp.m, 37);
        let before = sampled_total(&state, &ds, &sim, &hp);
        for epoch in 0..50 {
            train_epoch_text(&mut state, &ds, &sim, &hp, 2000 + epoch);
        }
        let after = sampled_total(&state, &ds, &sim, &hp);
        assert!(
            after < before,
            "text-encoder terms did not descend: {before} -> {after}"
        );
    }

    #[test]
    fn zero_inner_iterations_update_codes_but_not_encoders() {
        let ds = tiny_dataset();
        let hp = HyperParams {
            t_in: 0,
            ..tiny_hp()
        };
        let mut state = init_state(&ds, &hp, 8);
        let before = state.clone();
        outer_iteration(&mut state, &ds, &hp, 0).unwrap();
        assert_eq!(state.theta, before.theta);
        assert_eq!(state.psi, before.psi);
        // The ridge solve moves W off its all-zero start.
        assert_ne!(state.w, before.w);
    }

    #[test]
    fn zero_outer_iterations_return_initial_state() {
        let ds = tiny_dataset();
        let hp = HyperParams {
            t_out: 0,
            ..tiny_hp()
        };
        let (state, log) = train(&ds, &hp, 13).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(state, init_state(&ds, &hp, 13));
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let ds = tiny_dataset();
        let hp = tiny_hp();
        let (state_a, log_a) = train(&ds, &hp, 21).unwrap();
        let (state_b, log_b) = train(&ds, &hp, 21).unwrap();
        assert_eq!(state_a, state_b);
        assert!(log_a.matches_ignoring_time(&log_b));
        let (state_c, _) = train(&ds, &hp, 22).unwrap();
        assert_ne!(state_a, state_c);
    }

    #[test]
    fn objective_trend_decreases_over_ten_iterations() {
        let ds = generate(&SynthSpec {
            clusters: 3,
            per_cluster: 40,
            d_x: 8,
            d_y: 12,
            noise: 0.2,
            mix_prob: 0.2,
            seed: 19,
        });
        let hp = HyperParams {
            k: 8,
            m: 60,
            t_out: 10,
            t_in: 2,
            batch: 16,
            hidden_img: 32,
            hidden_txt: 32,
            ..Default::default()
        };
        let (_, log) = train(&ds, &hp, 5).unwrap();
        assert_eq!(log.records.len(), 10);
        let first = log.records[0].objective.total;
        let last = log.records[9].objective.total;
        assert!(
            last < first,
            "objective did not trend down: {first} -> {last}"
        );
        for rec in &log.records {
            assert!(rec.objective.total.is_finite());
            assert!(rec.elapsed_secs >= 0.0);
        }
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let ds = tiny_dataset();
        let hp = HyperParams {
            t_out: 4,
            ..tiny_hp()
        };
        let (full_state, full_log) = train(&ds, &hp, 33).unwrap();

        // Interrupted run: two iterations, checkpoint, restore, resume.
        let half_hp = HyperParams { t_out: 2, ..hp.clone() };
        let (half_state, half_log) = train(&ds, &half_hp, 33).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &half_state, &half_log, &hp).unwrap();

        let (mut restored, mut log, loaded_hp) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(restored, half_state);
        assert_eq!(loaded_hp, hp);
        resume_training(&mut restored, &mut log, &ds, &hp).unwrap();

        assert_eq!(restored, full_state);
        assert!(log.matches_ignoring_time(&full_log));
    }

    #[test]
    fn checkpoint_with_tampered_meta_is_rejected() {
        let ds = tiny_dataset();
        let hp = HyperParams { t_out: 1, ..tiny_hp() };
        let (state, log) = train(&ds, &hp, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &state, &log, &hp).unwrap();

        let meta_path = dir.path().join(META_FILE);
        let meta: CheckpointMeta =
            serde_json::from_str(&std::fs::read_to_string(&meta_path).unwrap()).unwrap();
        let tampered = CheckpointMeta { completed: meta.completed + 1, ..meta };
        std::fs::write(&meta_path, serde_json::to_string_pretty(&tampered).unwrap()).unwrap();

        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Parse { .. })
        ));
    }
}
