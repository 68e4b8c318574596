//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use edgecol::eval::{ndcg_at_k, read_qrels, Gain, Qrels, Run};
use edgecol::fixtures::{generate_corpus, SyntheticSpec};
use edgecol::fp16;
use edgecol::gradcheck::{finite_diff_check, DEFAULT_STEP};
use edgecol::index::{build_index, MultiVectorIndex};
use edgecol::losses::{
    info_nce_loss, kl_distill_loss, l2_distill_loss, InfoNceConfig, KlConfig, KlDirection,
};
use edgecol::mining::{apportion_slots, assemble_tuples, MiningConfig, NegativeMiner};
use edgecol::projection::{init_head, ProjectionConfig, ProjectionHead};
use edgecol::rng::DetRng;
use edgecol::scoring::{ScoredDoc, SimilarityKind};
use edgecol::train::{mean_tuple_loss, train_projection_toy, TrainerConfig};
use edgecol::types::{DocId, Dtype, QueryId, Seed, TokenMatrix};

const BIN: &str = env!("CARGO_BIN_EXE_edgecol");

struct Outcome {
    ok: bool,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Outcome {
    Outcome {
        ok: true,
        detail: detail.into(),
    }
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome {
        ok: false,
        detail: detail.into(),
    }
}

fn edgecol(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).output().expect("run edgecol");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn random_matrix(rng: &mut DetRng, rows: usize, dim: usize) -> TokenMatrix {
    TokenMatrix::new(rows, dim, (0..rows * dim).map(|_| rng.normal()).collect()).unwrap()
}

fn memory_table() -> Outcome {
    let expected = [(48, 275), (64, 366), (96, 549), (128, 732)];
    let mut got = Vec::new();
    for (dim, want) in expected {
        let dim = dim.to_string();
        let (code, out, err) = edgecol(&[
            "bench-mem",
            "--docs",
            "10000",
            "--tokens",
            "300",
            "--dim",
            &dim,
            "--dtype",
            "fp16",
        ]);
        if code != 0 {
            return fail(format!("bench-mem exited {code}: {err}"));
        }
        let v: u64 = out.trim().parse().unwrap_or(0);
        got.push(v);
        if v != want {
            return fail(format!("dim {dim}: got {v} MiB, want {want}"));
        }
    }
    pass(format!("MiB for dims 48/64/96/128 = {got:?}"))
}

/// Nested-loop scorer over the vectors the index actually stores.
fn oracle_search(index: &MultiVectorIndex, q: &TokenMatrix, k: usize) -> Vec<(String, f64)> {
    let unit = |r: &[f64]| -> Vec<f64> {
        let mut s = 0.0;
        for v in r {
            s += v * v;
        }
        let n = s.sqrt();
        r.iter().map(|v| v / n).collect()
    };
    let cosine = index.sim() == SimilarityKind::Cosine;
    let qrows: Vec<Vec<f64>> = q
        .iter_rows()
        .map(|r| if cosine { unit(r) } else { r.to_vec() })
        .collect();
    let mut all: Vec<(String, f64)> = Vec::new();
    for (id, d) in index.entries() {
        let drows: Vec<Vec<f64>> = d
            .iter_rows()
            .map(|r| if cosine { unit(r) } else { r.to_vec() })
            .collect();
        let mut total = 0.0;
        for qr in &qrows {
            let mut best = f64::NEG_INFINITY;
            for dr in &drows {
                let mut s = 0.0;
                for c in 0..qr.len() {
                    s += qr[c] * dr[c];
                }
                if s > best {
                    best = s;
                }
            }
            total += best;
        }
        all.push((id.to_string(), total));
    }
    // selection by repeated scan: highest score, then smallest id
    let mut out = Vec::new();
    while out.len() < k && !all.is_empty() {
        let mut best = 0;
        for i in 1..all.len() {
            let (a, b) = (&all[i], &all[best]);
            if a.1 > b.1 || (a.1 == b.1 && a.0.as_bytes() < b.0.as_bytes()) {
                best = i;
            }
        }
        out.push(all.swap_remove(best));
    }
    out
}

fn maxsim_oracle() -> Outcome {
    let mut rng = DetRng::new(Seed(2024));
    let mut ties = 0;
    for case in 0..50 {
        let dim = 4 + rng.below(61);
        let n_docs = 1 + rng.below(100);
        let n_queries = 1 + rng.below(10);
        // coarse dyadic values make ties common and are exact in fp16
        let coarse = case % 2 == 0;
        let value = |rng: &mut DetRng| {
            if coarse {
                (rng.below(9) as f64 - 4.0) / 4.0
            } else {
                rng.normal()
            }
        };
        let matrix = |rng: &mut DetRng| {
            let rows = 1 + rng.below(20);
            loop {
                let vals: Vec<f64> = (0..rows * dim).map(|_| value(rng)).collect();
                let m = TokenMatrix::new(rows, dim, vals).unwrap();
                if m.iter_rows().all(|r| r.iter().any(|v| *v != 0.0)) {
                    return m;
                }
            }
        };
        let docs: Vec<(DocId, TokenMatrix)> = (0..n_docs)
            .map(|i| {
                (
                    DocId::new(format!("doc{}", (i * 7919) % 1000)).unwrap(),
                    matrix(&mut rng),
                )
            })
            .collect::<BTreeMap<_, _>>()
            .into_iter()
            .collect();
        let sim = if case % 4 < 2 {
            SimilarityKind::Dot
        } else {
            SimilarityKind::Cosine
        };
        let dtype = if case % 3 == 0 {
            Dtype::Float32
        } else {
            Dtype::Float16
        };
        let index = build_index(docs, dim, dtype, sim).unwrap();
        let k = 1 + rng.below(index.len() + 5);
        for _ in 0..n_queries {
            let q = matrix(&mut rng);
            let got: Vec<(String, f64)> = index
                .search(&q, k)
                .unwrap()
                .into_iter()
                .map(|s: ScoredDoc| (s.doc.to_string(), s.score))
                .collect();
            let want = oracle_search(&index, &q, k);
            if got != want {
                return fail(format!(
                    "case {case}: search differs from nested-loop oracle"
                ));
            }
            ties += got.windows(2).filter(|w| w[0].1 == w[1].1).count();
        }
    }
    pass(format!(
        "50 instances identical, {ties} tied adjacent pairs exercised"
    ))
}

fn head_case(rng: &mut DetRng, config: ProjectionConfig, seed: u64) -> f64 {
    let head = init_head(config, Seed(seed)).unwrap();
    let rows = 1 + rng.below(4);
    let x = random_matrix(rng, rows, config.d_in);
    let up = random_matrix(rng, rows, config.d_out);
    let loss_grad = |p: &[f64]| {
        let mut h: ProjectionHead = head.clone();
        h.set_flat_params(p).unwrap();
        let y = h.forward(&x).unwrap();
        let loss = y.values().iter().zip(up.values()).map(|(a, b)| a * b).sum();
        (loss, h.backward(&x, &up).unwrap().flat())
    };
    let params_err = finite_diff_check(loss_grad, &head.flat_params(), DEFAULT_STEP);
    let input_err = finite_diff_check(
        |p| {
            let xm = TokenMatrix::new(rows, config.d_in, p.to_vec()).unwrap();
            let y = head.forward(&xm).unwrap();
            let loss = y.values().iter().zip(up.values()).map(|(a, b)| a * b).sum();
            (loss, head.backward(&xm, &up).unwrap().input.into_values())
        },
        x.values(),
        DEFAULT_STEP,
    );
    params_err.max(input_err)
}

fn gradient_checks() -> Outcome {
    let mut rng = DetRng::new(Seed(7));
    let mut worst = BTreeMap::new();
    let mut note = |name: &str, err: f64| {
        let w = worst.entry(name.to_string()).or_insert(0.0f64);
        *w = w.max(err);
    };
    for case in 0..100 {
        let (b, d) = (1 + rng.below(6), 1 + rng.below(10));
        let y = random_matrix(&mut rng, b, d);
        let yhat = random_matrix(&mut rng, b, d);
        note(
            "l2",
            finite_diff_check(
                |p| {
                    let (l, g) =
                        l2_distill_loss(&TokenMatrix::new(b, d, p.to_vec()).unwrap(), &y).unwrap();
                    (l, g.into_values())
                },
                yhat.values(),
                DEFAULT_STEP,
            ),
        );

        let n = 2 + rng.below(15);
        let teacher: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let student: Vec<f64> = (0..n).map(|_| 2.0 * rng.normal()).collect();
        let kl = KlConfig {
            temperature: rng.uniform_in(0.25, 2.0),
            normalize_teacher: true,
            direction: if case % 2 == 0 {
                KlDirection::TeacherStudent
            } else {
                KlDirection::StudentTeacher
            },
        };
        note(
            "kl",
            finite_diff_check(
                |s| kl_distill_loss(&teacher, s, &kl).unwrap(),
                &student,
                DEFAULT_STEP,
            ),
        );

        let (b, d) = (1 + rng.below(6), 2 + rng.below(8));
        let q = random_matrix(&mut rng, b, d);
        let k = random_matrix(&mut rng, b, d);
        let nce = InfoNceConfig {
            temperature: rng.uniform_in(0.1, 1.0),
            symmetric: case % 2 == 1,
        };
        let mut flat = q.values().to_vec();
        flat.extend_from_slice(k.values());
        note(
            "info_nce",
            finite_diff_check(
                |p| {
                    let qm = TokenMatrix::new(b, d, p[..b * d].to_vec()).unwrap();
                    let km = TokenMatrix::new(b, d, p[b * d..].to_vec()).unwrap();
                    let (l, gq, gk) = info_nce_loss(&qm, &km, &nce).unwrap();
                    let mut g = gq.into_values();
                    g.extend(gk.into_values());
                    (l, g)
                },
                &flat,
                DEFAULT_STEP,
            ),
        );

        let d_in = 2 + rng.below(6);
        let d_out = 1 + rng.below(6);
        let residual = case % 2 == 1;
        let square = case % 4 == 1;
        let d_out = if square { d_in } else { d_out };
        let linear = ProjectionConfig {
            residual,
            ..ProjectionConfig::linear(d_in, d_out)
        };
        let ffn = ProjectionConfig::ffn2(d_in, d_out, residual);
        note("head_linear", head_case(&mut rng, linear, case));
        note("head_ffn2", head_case(&mut rng, ffn, case));
    }
    let bad: Vec<String> = worst
        .iter()
        .filter(|(name, err)| **err > if name.starts_with("head") { 1e-4 } else { 1e-5 })
        .map(|(name, err)| format!("{name}={err:.2e}"))
        .collect();
    let summary = worst
        .iter()
        .map(|(n, e)| format!("{n}={e:.1e}"))
        .collect::<Vec<_>>()
        .join(" ");
    if bad.is_empty() {
        pass(format!("max relative errors: {summary}"))
    } else {
        fail(format!("over tolerance: {}", bad.join(", ")))
    }
}

fn teacher_invariance() -> Outcome {
    let mut rng = DetRng::new(Seed(99));
    let config = KlConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let teacher: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let student: Vec<f64> = (0..16).map(|_| rng.normal() * 3.0).collect();
        let a = 10.0 - 10.0 * rng.uniform();
        let c = rng.uniform_in(-5.0, 5.0);
        let shifted: Vec<f64> = teacher.iter().map(|s| a * s + c).collect();
        let l0 = kl_distill_loss(&teacher, &student, &config).unwrap().0;
        let l1 = kl_distill_loss(&shifted, &student, &config).unwrap().0;
        worst = worst.max((l0 - l1).abs());
    }
    if worst <= 1e-10 {
        pass(format!(
            "max |loss difference| over 1000 tuples = {worst:.1e}"
        ))
    } else {
        fail(format!("max |loss difference| = {worst:.3e} > 1e-10"))
    }
}

fn mining_contract() -> Outcome {
    let slots = apportion_slots(15, &[0.35, 0.35, 0.30]);
    if slots != [5, 5, 5] {
        return fail(format!("apportion_slots(15) = {slots:?}"));
    }
    let mut checked = 0;
    for (seed, noise) in [(1, 0.0), (2, 0.2), (3, 0.3)] {
        let f = generate_corpus(&SyntheticSpec {
            noise_scale: noise,
            seed: Seed(seed),
            ..SyntheticSpec::default()
        })
        .unwrap();
        let config = MiningConfig {
            seed: Seed(seed),
            ..MiningConfig::default()
        };
        let miner = NegativeMiner::new(&f.texts, &f.teacher, config.clone()).unwrap();
        let mined = miner.mine_all(&f.qrels).unwrap();
        for m in &mined {
            let ceiling = 0.95 * f.teacher.get(&m.query_id, &m.positive_id).unwrap();
            if let Some(d) = m
                .model
                .iter()
                .find(|d| f.teacher.get(&m.query_id, d).unwrap() >= ceiling)
            {
                return fail(format!(
                    "{d} mined for {} scores above the threshold",
                    m.query_id
                ));
            }
        }
        let tuples = assemble_tuples(&f.texts, &f.qrels, &f.teacher, config).unwrap();
        for t in &tuples {
            let positives = f.qrels.positives(&t.query_id);
            let distinct: std::collections::BTreeSet<_> = t.negative_ids.iter().collect();
            if t.negative_ids.len() != 15
                || distinct.len() != 15
                || t.negative_ids.iter().any(|d| positives.contains(&d))
            {
                return fail(format!(
                    "malformed tuple for ({}, {})",
                    t.query_id, t.positive_id
                ));
            }
            checked += 1;
        }
    }
    pass(format!(
        "slots (5,5,5); {checked} tuples with 15 distinct negatives, threshold respected"
    ))
}

fn permutations(items: &mut Vec<u32>, out: &mut dyn FnMut(&[u32])) {
    fn rec(items: &mut Vec<u32>, start: usize, out: &mut dyn FnMut(&[u32])) {
        if start == items.len() {
            out(items);
            return;
        }
        for i in start..items.len() {
            items.swap(start, i);
            rec(items, start + 1, out);
            items.swap(start, i);
        }
    }
    rec(items, 0, out);
}

fn oracle_dcg(rels: &[u32], k: usize) -> f64 {
    let mut s = 0.0;
    for (i, r) in rels.iter().take(k).enumerate() {
        s += f64::from(*r) / (2.0 + i as f64).log2();
    }
    s
}

fn ndcg_oracle() -> Outcome {
    let mut rng = DetRng::new(Seed(5));
    let q = QueryId::new("q").unwrap();
    let mut cases = 0;
    while cases < 500 {
        let n = 1 + rng.below(8);
        let k = 1 + rng.below(10);
        let rels: Vec<u32> = (0..n).map(|_| rng.below(4) as u32).collect();
        if rels.iter().all(|r| *r == 0) {
            continue;
        }
        let mut qrels = Qrels::new();
        let mut ranking = Vec::new();
        for (i, r) in rels.iter().enumerate() {
            let d = DocId::new(format!("d{i}")).unwrap();
            qrels.insert(q.clone(), d.clone(), *r);
            ranking.push(ScoredDoc::new(d, (n - i) as f64));
        }
        let run = Run::new([(q.clone(), ranking)].into(), "t").unwrap();
        let got = ndcg_at_k(&run, &qrels, k, Gain::Linear).unwrap().mean;
        let mut ideal = 0.0f64;
        permutations(&mut rels.clone(), &mut |p| {
            ideal = ideal.max(oracle_dcg(p, k))
        });
        let want = oracle_dcg(&rels, k) / ideal;
        if (got - want).abs() > 1e-12 {
            return fail(format!("case {cases}: harness {got} vs oracle {want}"));
        }
        cases += 1;
    }
    let mut qrels = Qrels::new();
    qrels.insert(q.clone(), DocId::new("rel").unwrap(), 1);
    let run = Run::new(
        [(
            q.clone(),
            vec![
                ScoredDoc::new(DocId::new("x").unwrap(), 2.0),
                ScoredDoc::new(DocId::new("rel").unwrap(), 1.0),
            ],
        )]
        .into(),
        "t",
    )
    .unwrap();
    let hand = ndcg_at_k(&run, &qrels, 10, Gain::Linear).unwrap().mean;
    let want = 1.0 / 3f64.log2();
    if (hand - want).abs() > 1e-12 {
        return fail(format!("rank-2 case {hand} != 1/log2(3)"));
    }
    pass(format!("500 cases within 1e-12; rank-2 case = {hand:.6}"))
}

fn end_to_end(dir: &Path) -> Outcome {
    let fx = dir.join("fx");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (code, _, err) = edgecol(&[
        "gen-fixture",
        "--out",
        &s(&fx),
        "--seed",
        "11",
        "--noise",
        "0",
    ]);
    if code != 0 {
        return fail(format!("gen-fixture: {err}"));
    }
    let idx = dir.join("idx.mvix");
    let run = dir.join("out.run");
    let steps: [Vec<String>; 2] = [
        [
            "index",
            "--input",
            &s(&fx.join("docs.mve")),
            "--out",
            &s(&idx),
            "--sim",
            "cosine",
            "--dtype",
            "fp16",
        ]
        .map(String::from)
        .to_vec(),
        [
            "search",
            "--index",
            &s(&idx),
            "--queries",
            &s(&fx.join("queries.mve")),
            "--k",
            "10",
            "--run",
            &s(&run),
        ]
        .map(String::from)
        .to_vec(),
    ];
    for args in &steps {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let (code, _, err) = edgecol(&args);
        if code != 0 {
            return fail(format!("{}: {err}", args[0]));
        }
    }
    let (code, out, err) = edgecol(&[
        "eval",
        "--run",
        &s(&run),
        "--qrels",
        &s(&fx.join("qrels.txt")),
        "--k",
        "10",
    ]);
    if code != 0 || out.trim() != "1.0000" {
        return fail(format!(
            "eval printed {:?} (exit {code}): {err}",
            out.trim()
        ));
    }
    if read_qrels(&fx.join("qrels.txt")).unwrap().is_empty() {
        return fail("fixture has no judgments");
    }

    let bytes = std::fs::read(&idx).unwrap();
    let resaved = MultiVectorIndex::from_bytes(&bytes)
        .unwrap()
        .to_bytes()
        .unwrap();
    if resaved != bytes {
        return fail("index save -> load -> save is not byte-identical");
    }

    let mut rng = DetRng::new(Seed(16));
    let mut worst = 0.0f64;
    for _ in 0..100_000 {
        let mag = 2f64.powf(rng.uniform_in(-30.0, 16.0)).min(fp16::MAX);
        let x = if rng.uniform() < 0.5 { -mag } else { mag };
        let back = fp16::decode(fp16::encode(x).unwrap()).unwrap();
        let bound = (2f64.powi(-11) * x.abs()).max(2f64.powi(-24));
        worst = worst.max((back - x).abs() / bound);
    }
    if worst > 1.0 {
        return fail(format!(
            "binary16 round-trip exceeds bound by factor {worst}"
        ));
    }
    pass(format!(
        "NDCG@10 = 1.0000, index re-save byte-identical, fp16 error <= {worst:.3} x bound"
    ))
}

fn toy_training() -> Outcome {
    let f = generate_corpus(&SyntheticSpec::toy_distillation(Seed(7))).unwrap();
    let queries: Vec<QueryId> = f.query_embeddings.keys().cloned().collect();
    let (train, held) = queries.split_at(64);
    let train_qrels = f.qrels_for(train);
    let held_qrels = f.qrels_for(held);
    let tuples =
        assemble_tuples(&f.texts, &train_qrels, &f.teacher, MiningConfig::default()).unwrap();
    if tuples.iter().any(|t| t.negative_ids.len() != 15) {
        return fail("tuples are not 16-way");
    }
    let head = init_head(ProjectionConfig::ffn2(32, 16, false), Seed(1)).unwrap();
    let config = TrainerConfig {
        batch_size: 128,
        steps: 200,
        learning_rate: 1.0,
        seed: Seed(3),
        ..TrainerConfig::default()
    };

    let heldout_ndcg = |h: &ProjectionHead| {
        let docs: Vec<(DocId, TokenMatrix)> = f
            .doc_embeddings
            .iter()
            .map(|(k, v)| (k.clone(), h.forward(v).unwrap()))
            .collect();
        let index = build_index(docs, 16, Dtype::Float16, SimilarityKind::Cosine).unwrap();
        let qs: BTreeMap<QueryId, TokenMatrix> = held
            .iter()
            .map(|q| (q.clone(), h.forward(&f.query_embeddings[q]).unwrap()))
            .collect();
        let run = Run::new(index.search_many(&qs, 10, 1).unwrap(), "t").unwrap();
        ndcg_at_k(&run, &held_qrels, 10, Gain::Linear).unwrap().mean
    };

    let before = mean_tuple_loss(
        &head,
        &tuples,
        &f.query_embeddings,
        &f.doc_embeddings,
        &config,
    )
    .unwrap();
    let first = train_projection_toy(
        head.clone(),
        &tuples,
        &f.query_embeddings,
        &f.doc_embeddings,
        &config,
    )
    .unwrap();
    let after = mean_tuple_loss(
        &first.head,
        &tuples,
        &f.query_embeddings,
        &f.doc_embeddings,
        &config,
    )
    .unwrap();
    let second = train_projection_toy(
        head.clone(),
        &tuples,
        &f.query_embeddings,
        &f.doc_embeddings,
        &config,
    )
    .unwrap();
    let deterministic =
        first.losses == second.losses && first.head.flat_params() == second.head.flat_params();
    let (n0, n1) = (heldout_ndcg(&head), heldout_ndcg(&first.head));
    let detail = format!(
        "{} tuples; mean KL {before:.4} -> {after:.4} ({:.1}% of initial); held-out NDCG@10 {n0:.4} -> {n1:.4}; deterministic={deterministic}",
        tuples.len(),
        100.0 * after / before
    );
    if after <= 0.5 * before && n1 > n0 && deterministic && tuples.len() >= 128 {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<(u32, &str, Duration, Box<dyn Fn() -> Outcome>)> = vec![
        (
            1,
            "memory table reproduction",
            Duration::from_secs(1),
            Box::new(memory_table),
        ),
        (
            2,
            "MaxSim oracle equivalence",
            Duration::from_secs(30),
            Box::new(maxsim_oracle),
        ),
        (
            3,
            "gradient verification",
            Duration::from_secs(60),
            Box::new(gradient_checks),
        ),
        (
            4,
            "teacher-normalization invariance",
            Duration::from_secs(60),
            Box::new(teacher_invariance),
        ),
        (
            5,
            "mining contract",
            Duration::from_secs(10),
            Box::new(mining_contract),
        ),
        (
            6,
            "NDCG correctness",
            Duration::from_secs(10),
            Box::new(ndcg_oracle),
        ),
        (
            7,
            "end-to-end self-consistency",
            Duration::from_secs(30),
            Box::new({
                let p = dir.path().to_path_buf();
                move || end_to_end(&p)
            }),
        ),
        (
            8,
            "toy training descent",
            Duration::from_secs(300),
            Box::new(toy_training),
        ),
    ];
    let mut failures = 0;
    for (n, name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= limit;
        let ok = outcome.ok && in_time;
        if !ok {
            failures += 1;
        }
        println!(
            "{} criterion {n} ({name}): {} [{:.2}s, limit {}s{}]",
            if ok { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", over time" }
        );
    }
    println!(
        "SKIP criterion 9 (absolute benchmark scores and hardware timings): excluded; needs released encoders and specific hardware"
    );
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
