//! Independent oracles shared by the integration suites. Nothing here calls
//! into the code under test beyond constructors.

#![allow(dead_code)]

use std::cmp::Ordering;

use dejavu::datamodel::{EmbeddingMatrix, SampleId};
use dejavu::reference::{truncate_objects, NbModel};
use rand::seq::SliceRandom;
use rand::Rng;

/// Lane-ordered inner product: element `i` goes to lane `i % 8`, lanes are
/// combined pairwise.
pub fn oracle_sim(a: &[f32], b: &[f32]) -> f64 {
    let mut lanes = [0.0f64; 8];
    for i in 0..a.len() {
        lanes[i % 8] += f64::from(a[i]) * f64::from(b[i]);
    }
    let s = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    s + 0.0
}

/// Full scan, full sort: similarity descending, id ascending.
pub fn brute_force_knn(base: &EmbeddingMatrix, q: &[f32], k: usize) -> Vec<(SampleId, f64)> {
    let mut all: Vec<(SampleId, f64)> = (0..base.len())
        .map(|i| (base.ids()[i].clone(), oracle_sim(base.row(i), q)))
        .collect();
    all.sort_by(|a, b| match b.1.partial_cmp(&a.1).unwrap() {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    all.truncate(k);
    all
}

/// Random base matrix with planted duplicate rows (exact similarity ties)
/// and ids whose order differs from row order.
pub fn tie_heavy_matrix<R: Rng>(rng: &mut R, n: usize, d: usize) -> EmbeddingMatrix {
    let distinct = (n / 3).max(1);
    let protos: Vec<Vec<f32>> = (0..distinct)
        .map(|_| {
            let mut row: Vec<f32> = (0..d).map(|_| rng.random_range(-2i32..=2) as f32).collect();
            if row.iter().all(|&v| v == 0.0) {
                row[0] = 1.0;
            }
            row
        })
        .collect();
    let rows: Vec<Vec<f32>> = (0..n).map(|_| protos[rng.random_range(0..distinct)].clone()).collect();
    let mut names: Vec<usize> = (0..n).collect();
    names.shuffle(rng);
    let ids = names
        .into_iter()
        .map(|i| SampleId::new(format!("s{i:05}")).unwrap())
        .collect();
    EmbeddingMatrix::from_rows(ids, &rows)
        .unwrap()
        .normalize_rows()
        .unwrap()
}

/// `(|{t > r}| - |{t < r}|) / n` by explicit counting.
pub fn brute_gap(pairs: &[(f64, f64)]) -> f64 {
    let wins = pairs.iter().filter(|(t, r)| t > r).count();
    let losses = pairs.iter().filter(|(t, r)| t < r).count();
    (wins as f64 - losses as f64) / pairs.len() as f64
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Posterior by multiplying probabilities directly, no logs.
pub fn nb_direct_posterior(model: &NbModel, objects: &[(usize, f64)]) -> Vec<f64> {
    let kept = truncate_objects(objects, model.top_k());
    let prior = model.prior();
    let scores: Vec<f64> = (0..prior.len())
        .map(|t| {
            let mut s = prior[t];
            for &k in &kept {
                s *= model.cond(t, k) / model.marginal(k);
            }
            s
        })
        .collect();
    let z: f64 = scores.iter().sum();
    scores.iter().map(|s| s / z).collect()
}

pub fn entropy_direct(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Runs the `dejavu` binary inside `dir`.
pub fn dejavu(dir: &std::path::Path, args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_dejavu"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn dejavu")
}

/// Like [`dejavu`] but panics with stderr on a nonzero exit.
pub fn dejavu_ok(dir: &std::path::Path, args: &[&str]) {
    let out = dejavu(dir, args);
    assert!(
        out.status.success(),
        "dejavu {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Every subcommand on small synthetic worlds, with relative paths so two
/// directories can be compared byte for byte.
pub fn full_pipeline(dir: &std::path::Path, threads: &str) {
    let t = ["--threads", threads];
    let run = |args: &[&str]| {
        let mut all: Vec<&str> = args.to_vec();
        all.extend_from_slice(&t);
        dejavu_ok(dir, &all);
    };
    run(&["synth", "--out-dir", "w", "--seed", "5", "--n-train", "600", "--n-public", "1500"]);
    run(&["nb-fit", "--annotations", "w/public_annotations.jsonl", "--labels", "w/public_labels.csv", "--out", "nb.json"]);
    let vision_common = [
        "vision", "--target", "w/train_embeddings.dvem", "--public", "w/public_embeddings.dvem",
        "--public-labels", "w/public_labels.csv", "--labels", "w/train_labels.csv", "--p", "10", "--p", "100",
    ];
    let mut nb = vision_common.to_vec();
    nb.extend_from_slice(&["--reference", "nb", "--nb-model", "nb.json", "--annotations", "w/train_annotations.jsonl", "--out", "v_nb.json"]);
    run(&nb);
    let mut alt = vision_common.to_vec();
    alt.extend_from_slice(&["--reference", "alt-knn", "--alt-target", "w/train_embeddings.dvem", "--alt-public", "w/public_embeddings.dvem", "--agreement-by-correctness", "--out", "v_alt.json"]);
    run(&alt);
    run(&["agree", "--report", "nb=v_nb.json", "--report", "alt=v_alt.json", "--probe", "nb", "--top-percent", "50", "--out", "agree.json"]);
    run(&["synth", "--mode", "vlm", "--out-dir", "m", "--seed", "2", "--n-train", "400", "--n-public", "1000", "--rho", "0.5"]);
    run(&[
        "vlm", "--target-captions", "m/target_train_captions.dvem", "--target-public-img", "m/target_public_images.dvem",
        "--ref-captions", "m/ref_train_captions.dvem", "--ref-public", "m/ref_public_captions.dvem",
        "--train-objects", "m/train_objects.jsonl", "--public-objects", "m/public_objects.jsonl",
        "--top-k-objects", "3", "--grid-k", "1", "--grid-k", "10", "--grid-top-k", "all", "--grid-top-k", "3", "--out", "vlm.json",
    ]);
    run(&[
        "vlm", "--mode", "t2t", "--target-captions", "m/target_train_captions.dvem", "--target-public-text", "m/target_public_captions.dvem",
        "--ref-captions", "m/ref_train_captions.dvem", "--ref-public", "m/ref_public_captions.dvem",
        "--train-objects", "m/train_objects.jsonl", "--public-objects", "m/public_objects.jsonl", "--out", "vlm_t2t.json",
    ]);
}

/// Relative path and contents of every file under `dir`, sorted by path.
pub fn snapshot(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &std::path::Path, cur: &std::path::Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(cur).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
