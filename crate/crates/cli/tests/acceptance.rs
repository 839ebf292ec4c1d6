//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test -p sardonyx-cli --test acceptance`.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use sardonyx::eval::{self, LabeledPredictions};
use sardonyx::fusion::{
    self, ExemplarMode, FusionDims, FusionParams, LoraAdapter, PhonemeEmbedding, PipelineInputs,
    TrainingExample,
};
use sardonyx::numerics::Matrix;
use sardonyx::prosody::{self, F0Config, FrameFeatures, FrameSpec, ProsodyEmbedding, Waveform};
use sardonyx::retrieval::{self, SemanticEmbedding};
use sardonyx::store::{self, Label, UtteranceRecord};
use sardonyx::{blob, Vector};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale)).unwrap()
}

/// Values representable in f32, so stored copies compare exactly.
fn uniform_f32(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0f32..1.0) as f64).unwrap()
}

// 1 -------------------------------------------------------------------------

fn exhaustive_top_k(embeddings: &[Vec<f64>], tokens: &[Vec<f64>], k: usize) -> Vec<(usize, f64)> {
    let d = tokens[0].len();
    let mut q = vec![0.0; d];
    for t in tokens {
        for (a, b) in q.iter_mut().zip(t) {
            *a += b / tokens.len() as f64;
        }
    }
    let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(usize, f64)> = embeddings
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let en = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = e.iter().zip(&q).map(|(a, b)| a * b).sum();
            (i, (dot / (en * qn)).clamp(-1.0, 1.0))
        })
        .collect();
    // selection sort: highest score first, lower index first on ties
    for i in 0..scored.len() {
        let mut best = i;
        for j in i + 1..scored.len() {
            let (bj, bb) = (scored[j], scored[best]);
            if bj.1 > bb.1 || (bj.1 == bb.1 && bj.0 < bb.0) {
                best = j;
            }
        }
        scored.swap(i, best);
    }
    scored.truncate(k);
    scored
}

fn retrieval_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut instances = Vec::new();
    for _ in 0..200 {
        let (n, d, t) = (
            rng.random_range(1..=64),
            rng.random_range(1..=16),
            rng.random_range(1..=6),
        );
        let k = rng.random_range(1..=n);
        // a few duplicated rows exercise tie-breaking
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            if i > 0 && rng.random_bool(0.1) {
                let j = rng.random_range(0..i);
                rows.push(rows[j].clone());
            } else {
                rows.push(uniform_f32(&mut rng, 1, d).into_vec());
            }
        }
        let tokens: Vec<Vec<f64>> = (0..t)
            .map(|_| uniform_f32(&mut rng, 1, d).into_vec())
            .collect();
        instances.push((rows, tokens, k));
    }
    let start = Instant::now();
    let mut compared = 0;
    for (rows, tokens, k) in &instances {
        let records = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                UtteranceRecord::new(
                    format!("r{i}"),
                    Label::Sarcastic,
                    Vector::new(r.clone()).unwrap(),
                )
            })
            .collect();
        let index = ok(store::build_index(records))?;
        let query = SemanticEmbedding::new(Matrix::from_rows(tokens).unwrap());
        let hits = ok(retrieval::retrieve(&index, &query, *k))?;
        let expected = exhaustive_top_k(rows, tokens, *k);
        ensure!(
            hits.len() == expected.len(),
            "hit count {} vs {}",
            hits.len(),
            expected.len()
        );
        for (h, (pos, score)) in hits.iter().zip(&expected) {
            ensure!(
                h.record_id == format!("r{pos}"),
                "order differs: {} vs r{pos}",
                h.record_id
            );
            ensure!(
                (h.score - score).abs() <= 1e-9,
                "score {} vs {score}",
                h.score
            );
            compared += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    ensure!(elapsed < 1.0, "took {elapsed:.3}s");
    Ok(format!(
        "200 instances, {compared} hits identical, {elapsed:.3}s"
    ))
}

// 2 -------------------------------------------------------------------------

fn gradient_verification() -> Outcome {
    let report = ok(fusion::grad_check(2024, 50))?;
    ensure!(report.step == 1e-3, "step {}", report.step);
    ensure!(
        report.max_rel_error < 1e-3,
        "max relative error {:e}",
        report.max_rel_error
    );
    Ok(format!(
        "50 trials, {} entries, max relative error {:.2e}",
        report.entries_checked, report.max_rel_error
    ))
}

// 3 -------------------------------------------------------------------------

fn attention_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let dims = FusionDims {
            d_p: rng.random_range(1..=8),
            d_t: rng.random_range(1..=8),
            d_k: rng.random_range(1..=8),
            d_v: rng.random_range(1..=8),
            d_w: rng.random_range(1..=8),
        };
        let params = ok(FusionParams::init(dims, &mut rng))?;
        let scale = 10f64.powi(rng.random_range(-2..=2));
        let (t_p, t_t) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let e_p = PhonemeEmbedding::new(uniform(&mut rng, t_p, dims.d_p, scale));
        let e_s = SemanticEmbedding::new(uniform(&mut rng, t_t, dims.d_t, scale));
        let (_, attn) = ok(fusion::cross_attention_forward(&e_p, &e_s, &params))?;
        for row in attn.row_iter() {
            ensure!(row.iter().all(|&a| a >= 0.0), "negative attention weight");
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure!(worst <= 1e-6, "row sum off by {worst:e}");
    Ok(format!("1000 passes, worst |row sum - 1| = {worst:.2e}"))
}

// 4 -------------------------------------------------------------------------

fn toy_problem(seed: u64, rank: usize) -> (FusionParams, LoraAdapter, Vec<TrainingExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = FusionDims::default();
    let teacher = FusionParams::init(dims, &mut rng).unwrap();
    let teacher_lora = {
        let a = uniform(&mut rng, dims.d_t, rank, 0.5);
        let b = uniform(&mut rng, rank, dims.d_t, 0.5);
        LoraAdapter::new(Matrix::identity(dims.d_t).unwrap(), a, b, 2.0 * rank as f64).unwrap()
    };
    let batch = (0..8)
        .map(|_| {
            let inputs = PipelineInputs {
                phonemes: PhonemeEmbedding::new(uniform(&mut rng, 5, dims.d_p, 1.0)),
                semantic_features: uniform(&mut rng, 6, dims.d_t, 1.0),
                exemplars: (0..2)
                    .map(|_| {
                        ProsodyEmbedding::new(
                            Vector::new(uniform(&mut rng, 1, dims.d_w, 1.0).into_vec()).unwrap(),
                        )
                    })
                    .collect(),
            };
            let target =
                fusion::pipeline_forward(&inputs, &teacher, &teacher_lora, ExemplarMode::Sum)
                    .unwrap()
                    .z;
            TrainingExample { inputs, target }
        })
        .collect();
    let student = FusionParams::init(dims, &mut rng).unwrap();
    let adapter = LoraAdapter::init(dims.d_t, dims.d_t, rank, 2.0 * rank as f64, &mut rng).unwrap();
    // the frozen base matches the teacher's; only the low-rank part is learned
    let adapter = LoraAdapter::new(
        Matrix::identity(dims.d_t).unwrap(),
        adapter.a().clone(),
        adapter.b().clone(),
        adapter.alpha(),
    )
    .unwrap();
    (student, adapter, batch)
}

fn singular_values(m: &Matrix) -> Vec<f64> {
    let dm = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let mut s: Vec<f64> = dm.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn lora_contract() -> Outcome {
    let rank = 2;
    let (mut params, mut adapter, batch) = toy_problem(4, rank);
    let base = adapter.base().clone();

    let mut losses = Vec::with_capacity(1000);
    for _ in 0..1000 {
        losses.push(ok(fusion::train_step_toy(
            &mut params,
            &mut adapter,
            &batch,
            1e-2,
            ExemplarMode::Sum,
        ))?);
    }
    let same_bits = base
        .as_slice()
        .iter()
        .zip(adapter.base().as_slice())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    ensure!(same_bits, "W_base changed during training");

    let s = singular_values(&adapter.delta());
    ensure!(s[0] > 0.0, "delta stayed zero");
    let trailing = s[rank..].iter().copied().fold(0.0, f64::max);
    ensure!(
        trailing < 1e-8 * s[0],
        "trailing singular value {trailing:e} vs max {:e}",
        s[0]
    );

    let (l0, l100) = (losses[0], losses[100]);
    ensure!(
        l100 <= 0.5 * l0,
        "W_base bit-identical and delta rank <= {rank}, but loss {l0:.4e} -> {l100:.4e} after 100 steps ({:.1}% drop, need 50%)",
        100.0 * (1.0 - l100 / l0)
    );
    Ok(format!(
        "W_base bit-identical, rank {rank} delta (trailing/max {:.1e}), loss {l0:.3e} -> {l100:.3e} ({:.0}% drop)",
        trailing / s[0],
        100.0 * (1.0 - l100 / l0)
    ))
}

// 5 -------------------------------------------------------------------------

fn frame_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Cheapest monotone path by enumerating every step sequence.
fn enumerate_paths(x: &Matrix, y: &Matrix) -> f64 {
    fn walk(x: &Matrix, y: &Matrix, i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + frame_distance(x.row(i), y.row(j));
        if i + 1 == x.rows() && j + 1 == y.rows() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < x.rows() && j + 1 < y.rows() {
            walk(x, y, i + 1, j + 1, acc, best);
        }
        if i + 1 < x.rows() {
            walk(x, y, i + 1, j, acc, best);
        }
        if j + 1 < y.rows() {
            walk(x, y, i, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(x, y, 0, 0, 0.0, &mut best);
    best
}

fn mcd_dtw() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = FrameFeatures::new(uniform(&mut rng, 7, 13, 5.0));
    let b = FrameFeatures::new(uniform(&mut rng, 4, 13, 5.0));
    let identity = ok(eval::mcd(&a, &a, true))?;
    ensure!(identity == 0.0, "identity MCD {identity}");
    let (ab, ba) = (ok(eval::mcd(&a, &b, true))?, ok(eval::mcd(&b, &a, true))?);
    ensure!((ab - ba).abs() <= 1e-9, "asymmetric: {ab} vs {ba}");

    let x = FrameFeatures::new(Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap());
    let y = FrameFeatures::new(Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap());
    let single = ok(eval::mcd(&x, &y, true))?;
    let closed = 10.0 / std::f64::consts::LN_10 * 2f64.sqrt();
    ensure!(
        (single - closed).abs() <= 1e-4,
        "single frame {single} vs {closed}"
    );

    for _ in 0..100 {
        let d = rng.random_range(2..=6);
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let x = uniform(&mut rng, n, d, 2.0);
        let y = uniform(&mut rng, m, d, 2.0);
        let (path, cost) = ok(eval::dtw_align(
            &FrameFeatures::new(x.clone()),
            &FrameFeatures::new(y.clone()),
        ))?;
        let best = enumerate_paths(&x, &y);
        ensure!(
            (cost - best).abs() <= 1e-9 * best.max(1.0),
            "DTW {cost} vs enumeration {best}"
        );
        let along: f64 = path
            .pairs()
            .iter()
            .map(|&(i, j)| frame_distance(x.row(i), y.row(j)))
            .sum();
        ensure!(
            (along - cost).abs() <= 1e-9 * cost.max(1.0),
            "path cost {along} vs reported {cost}"
        );
    }
    Ok(format!(
        "identity 0 dB, symmetric, single frame {single:.6} dB, 100 DTW pairs optimal"
    ))
}

// 6 -------------------------------------------------------------------------

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn f0_accuracy() -> Outcome {
    let sr = 16_000;
    let spec = FrameSpec::default();
    let config = F0Config::default();
    let mut notes = Vec::new();
    for f in [110.0, 220.0, 440.0] {
        let samples = (0..sr)
            .map(|n| 0.5 * (2.0 * std::f64::consts::PI * f * n as f64 / sr as f64).sin())
            .collect();
        let track = ok(prosody::estimate_f0(
            &ok(Waveform::new(sr, samples))?,
            spec,
            &config,
        ))?;
        let voiced: Vec<f64> = track.voiced().collect();
        ensure!(!voiced.is_empty(), "{f} Hz: no voiced frames");
        let m = median(voiced);
        ensure!((m - f).abs() <= 0.02 * f, "{f} Hz: median {m:.2}");
        notes.push(format!("{f:.0}->{m:.1}"));
    }
    let silence = ok(prosody::estimate_f0(
        &ok(Waveform::new(sr, vec![0.0; sr as usize]))?,
        spec,
        &config,
    ))?;
    ensure!(
        silence.voiced_count() == 0,
        "{} voiced frames in silence",
        silence.voiced_count()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let noise = (0..sr).map(|_| rng.random_range(-0.5..0.5)).collect();
    let track = ok(prosody::estimate_f0(
        &ok(Waveform::new(sr, noise))?,
        spec,
        &config,
    ))?;
    let unvoiced = 1.0 - track.voiced_count() as f64 / track.frames().len() as f64;
    ensure!(
        unvoiced >= 0.8,
        "noise only {:.0}% unvoiced",
        100.0 * unvoiced
    );
    Ok(format!(
        "medians {} Hz, silence unvoiced, noise {:.0}% unvoiced",
        notes.join(", "),
        100.0 * unvoiced
    ))
}

// 7 -------------------------------------------------------------------------

fn persistence() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let records: Vec<UtteranceRecord> = (0..20)
        .map(|i| {
            let label = if i % 3 == 0 {
                Label::NonSarcastic
            } else {
                Label::Sarcastic
            };
            UtteranceRecord::new(
                format!("utt{i:03}"),
                label,
                Vector::new(uniform(&mut rng, 1, 12, 3.0).into_vec()).unwrap(),
            )
            .with_text(format!("line {i}"))
        })
        .collect();
    let index = ok(store::build_index(records))?;
    let (m, b) = (dir.path().join("index.json"), dir.path().join("index.semb"));
    ok(store::save_index(&index, &m, &b))?;
    let loaded = ok(store::load_index(&m, &b))?;
    ensure!(loaded == index, "loaded index differs");
    let bits = |i: &store::ExemplarIndex| -> Vec<u64> {
        i.embedding_matrix()
            .as_slice()
            .iter()
            .map(|x| x.to_bits())
            .collect()
    };
    ensure!(bits(&loaded) == bits(&index), "embedding bits differ");

    let single = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
    let bytes = ok(blob::encode(&single))?;
    let expected: [u8; 24] = [
        0x53, 0x45, 0x4D, 0x42, 0x01, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00,
        0x00, 0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40,
    ];
    ensure!(bytes == expected, "byte layout {bytes:02X?}");

    let wide = ok(blob::encode(&uniform(&mut rng, 3, 4, 1.0)))?;
    let mut rejected = 0;
    for base in [&bytes, &wide] {
        for pos in 0..blob::HEADER_LEN {
            for flip in 1..=255u8 {
                let mut corrupt = base.clone();
                corrupt[pos] ^= flip;
                ensure!(
                    blob::decode(&corrupt).is_err(),
                    "header byte {pos} ^ {flip:#04x} accepted"
                );
                rejected += 1;
            }
        }
    }
    Ok(format!(
        "round trip bit-exact, byte vector matches, {rejected} corrupted headers rejected"
    ))
}

// 8 -------------------------------------------------------------------------

#[allow(clippy::needless_range_loop)]
fn confusion_oracle(gold: &[Label], pred: &[Label]) -> (f64, f64, f64) {
    // confusion[g][p], index 0 = sarcastic
    let idx = |l: Label| usize::from(l == Label::NonSarcastic);
    let mut c = [[0usize; 2]; 2];
    for (&g, &p) in gold.iter().zip(pred) {
        c[idx(g)][idx(p)] += 1;
    }
    let n = gold.len() as f64;
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for k in 0..2 {
        let support = c[k][0] + c[k][1];
        let predicted = c[0][k] + c[1][k];
        let p = div(c[k][k], predicted);
        let r = div(c[k][k], support);
        let f = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        let w = support as f64 / n;
        wp += w * p;
        wr += w * r;
        wf += w * f;
    }
    (100.0 * wp, 100.0 * wr, 100.0 * wf)
}

fn detection_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pick = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.5) {
            Label::Sarcastic
        } else {
            Label::NonSarcastic
        }
    };
    for _ in 0..20 {
        let n = rng.random_range(1..=40);
        let gold: Vec<Label> = (0..n).map(|_| pick(&mut rng)).collect();
        let pred: Vec<Label> = (0..n).map(|_| pick(&mut rng)).collect();
        let got =
            eval::detection_metrics(&ok(LabeledPredictions::new(gold.clone(), pred.clone()))?);
        let (p, r, f) = confusion_oracle(&gold, &pred);
        ensure!(
            (got.precision - p).abs() <= 1e-9
                && (got.recall - r).abs() <= 1e-9
                && (got.weighted_f1 - f).abs() <= 1e-9,
            "{got:?} vs oracle ({p}, {r}, {f})"
        );
    }
    use Label::{NonSarcastic as N, Sarcastic as S};
    let first = eval::detection_metrics(&ok(LabeledPredictions::new(
        vec![S, S, N, N],
        vec![S, N, N, N],
    ))?);
    let second = eval::detection_metrics(&ok(LabeledPredictions::new(vec![S, N], vec![S, S]))?);
    ensure!(
        (first.weighted_f1 - 73.33).abs() <= 0.01,
        "first example F1 {}",
        first.weighted_f1
    );
    ensure!(
        (second.weighted_f1 - 33.33).abs() <= 0.01,
        "second example F1 {}",
        second.weighted_f1
    );
    Ok(format!(
        "20 random vectors match the oracle, examples {:.2}% and {:.2}%",
        first.weighted_f1, second.weighted_f1
    ))
}

// 9 -------------------------------------------------------------------------

fn split_protocol() -> Outcome {
    let records: Vec<UtteranceRecord> = (0..1202)
        .map(|i| {
            let label = if i % 2 == 0 {
                Label::Sarcastic
            } else {
                Label::NonSarcastic
            };
            UtteranceRecord::new(
                format!("u{i:04}"),
                label,
                Vector::new(vec![1.0, i as f64]).unwrap(),
            )
        })
        .collect();
    let a = ok(eval::dataset_split(records.clone(), 42))?;
    let b = ok(eval::dataset_split(records, 42))?;
    ensure!(a == b, "same seed gave different splits");
    let sizes = (a.train.len(), a.val.len(), a.test.len());
    ensure!(sizes == (962, 120, 120), "sizes {sizes:?}");
    for (name, part, share) in [
        ("train", &a.train, 0.8),
        ("val", &a.val, 0.1),
        ("test", &a.test, 0.1),
    ] {
        for label in Label::ALL {
            let n = part.iter().filter(|r| r.label == label).count() as f64;
            ensure!(
                (n - share * 601.0).abs() <= 1.0,
                "{name}/{label}: {n} records"
            );
        }
    }
    Ok("1202 -> 962/120/120, per-class within 1 record, deterministic".into())
}

// 10 ------------------------------------------------------------------------

fn sardonyx(args: &[&str]) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sardonyx"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "sardonyx {}: {}",
            args[0],
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())
}

/// Straight-line attention plus exemplar offset, written with plain loops.
fn reference_z(
    e_p: &Matrix,
    e_s: &Matrix,
    exemplars: &[Vec<f64>],
    w: [&Matrix; 4],
) -> Vec<Vec<f64>> {
    let [w_q, w_k, w_v, w_w] = w;
    let project = |x: &Matrix, m: &Matrix| -> Vec<Vec<f64>> {
        (0..x.rows())
            .map(|i| {
                (0..m.cols())
                    .map(|j| (0..x.cols()).map(|l| x.get(i, l) * m.get(l, j)).sum())
                    .collect()
            })
            .collect()
    };
    let (q, k, v) = (project(e_p, w_q), project(e_s, w_k), project(e_s, w_v));
    let d_k = w_q.cols() as f64;
    let mut offset = vec![0.0; w_w.cols()];
    for e in exemplars {
        for (j, o) in offset.iter_mut().enumerate() {
            *o += (0..e.len()).map(|l| e[l] * w_w.get(l, j)).sum::<f64>();
        }
    }
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d_k.sqrt())
                .collect();
            let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let total: f64 = exp.iter().sum();
            (0..v[0].len())
                .map(|c| {
                    exp.iter()
                        .zip(&v)
                        .map(|(a, vj)| a / total * vj[c])
                        .sum::<f64>()
                        + offset[c]
                })
                .collect()
        })
        .collect()
}

fn end_to_end_cli() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let p = |name: &str| {
        dir.path()
            .join(name)
            .to_str()
            .expect("utf-8 temp path")
            .to_string()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (d_p, d_t, d_k, d_v, d_w, t_p, t_t, k) = (6, 8, 5, 7, 4, 5, 6, 3);
    let (raw_m, raw_b) = (p("raw.json"), p("raw.semb"));
    let (index_m, index_b) = (p("index.json"), p("index.semb"));
    let (query, phonemes, params, z_out) = (
        p("query.semb"),
        p("phonemes.semb"),
        p("params"),
        p("z.semb"),
    );

    // raw corpus: semantic embeddings in an index, frame-level prosody per record
    let records: Vec<UtteranceRecord> = (0..12)
        .map(|i| {
            let label = if i % 4 == 0 {
                Label::NonSarcastic
            } else {
                Label::Sarcastic
            };
            let frames = p(&format!("frames_{i:02}.semb"));
            blob::write(Path::new(&frames), &uniform_f32(&mut rng, 9, d_w)).unwrap();
            UtteranceRecord::new(
                format!("clip{i:02}"),
                label,
                Vector::new(uniform_f32(&mut rng, 1, d_t).into_vec()).unwrap(),
            )
            .with_audio_path(frames)
        })
        .collect();
    ok(store::save_index(
        &ok(store::build_index(records))?,
        Path::new(&raw_m),
        Path::new(&raw_b),
    ))?;
    ok(blob::write(
        Path::new(&query),
        &uniform_f32(&mut rng, t_t, d_t),
    ))?;
    ok(blob::write(
        Path::new(&phonemes),
        &uniform_f32(&mut rng, t_p, d_p),
    ))?;

    sardonyx(&[
        "build-index",
        "--manifest",
        &raw_m,
        "--blob",
        &raw_b,
        "--out-manifest",
        &index_m,
        "--out-blob",
        &index_b,
        "--only-label",
        "sarcastic",
    ])?;
    let k_arg = k.to_string();
    let hits = sardonyx(&[
        "retrieve",
        "--index-manifest",
        &index_m,
        "--index-blob",
        &index_b,
        "--query-blob",
        &query,
        "--k",
        &k_arg,
    ])?;
    let hits = hits["hits"].as_array().ok_or("no hits array")?;
    ensure!(hits.len() == k, "{} hits", hits.len());

    let mut pooled_paths = Vec::new();
    let mut exemplars = Vec::new();
    for (i, hit) in hits.iter().enumerate() {
        ensure!(hit["label"] == "sarcastic", "non-sarcastic hit {hit}");
        let frames = hit["audio_path"].as_str().ok_or("hit without audio_path")?;
        let pooled = p(&format!("exemplar_{i}.semb"));
        sardonyx(&["pool", "--in", frames, "--out", &pooled])?;
        let m = ok(blob::read(Path::new(&pooled)))?;
        ensure!(m.shape() == (1, d_w), "pooled shape {:?}", m.shape());
        // scripted pooling over the stored frames
        let f = ok(blob::read(Path::new(frames)))?;
        let mean: Vec<f64> = (0..d_w)
            .map(|c| (0..f.rows()).map(|r| f.get(r, c)).sum::<f64>() / f.rows() as f64)
            .collect();
        ensure!(
            m.row(0)
                .iter()
                .zip(&mean)
                .all(|(a, b)| (a - b).abs() <= 1e-6),
            "pooled values differ"
        );
        exemplars.push(m.row(0).to_vec());
        pooled_paths.push(pooled);
    }

    let dims: Vec<String> = [d_p, d_t, d_k, d_v, d_w]
        .iter()
        .map(usize::to_string)
        .collect();
    sardonyx(&[
        "init-params",
        "--out",
        &params,
        "--seed",
        "11",
        "--d-p",
        &dims[0],
        "--d-t",
        &dims[1],
        "--d-k",
        &dims[2],
        "--d-v",
        &dims[3],
        "--d-w",
        &dims[4],
    ])?;

    let mut fuse = vec![
        "fuse",
        "--phoneme",
        &phonemes,
        "--semantic",
        &query,
        "--params",
        &params,
        "--out",
        &z_out,
        "--exemplars",
    ];
    fuse.extend(pooled_paths.iter().map(String::as_str));
    sardonyx(&fuse)?;

    let z = ok(blob::read(Path::new(&z_out)))?;
    ensure!(
        z.shape() == (t_p, d_v),
        "Z shape {:?}, expected ({t_p}, {d_v})",
        z.shape()
    );
    let w = |name: &str| blob::read(&Path::new(&params).join(format!("{name}.semb"))).unwrap();
    let (w_q, w_k, w_v, w_w) = (w("w_q"), w("w_k"), w("w_v"), w("w_w"));
    let reference = reference_z(
        &ok(blob::read(Path::new(&phonemes)))?,
        &ok(blob::read(Path::new(&query)))?,
        &exemplars,
        [&w_q, &w_k, &w_v, &w_w],
    );
    let mut worst: f64 = 0.0;
    for (r, row) in reference.iter().enumerate() {
        for (c, &want) in row.iter().enumerate() {
            worst = worst.max((z.get(r, c) - want).abs());
        }
    }
    ensure!(worst <= 1e-6, "Z differs from reference by {worst:e}");
    Ok(format!(
        "Z is {t_p}x{d_v}, max |Z - reference| = {worst:.2e}"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("retrieval matches exhaustive oracle", retrieval_oracle),
        (
            "analytic gradients match finite differences",
            gradient_verification,
        ),
        ("attention rows are normalized", attention_normalization),
        (
            "LoRA base frozen, low-rank delta, toy loss halves",
            lora_contract,
        ),
        ("MCD and DTW correctness", mcd_dtw),
        ("F0 accuracy, silence and noise voicing", f0_accuracy),
        ("index and blob persistence", persistence),
        ("detection metrics match oracle", detection_metrics),
        ("stratified 8:1:1 split", split_protocol),
        ("CLI build-index -> retrieve -> fuse", end_to_end_cli),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
