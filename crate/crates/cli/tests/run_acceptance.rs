//! Acceptance run: prints one PASS/FAIL line per criterion, then fails if any
//! criterion failed. Training goes through the `stpnet` binary exactly as a
//! user would run it. The six default desk runs take hours on one core; set
//! `STPNET_ACCEPTANCE_DIR` to keep their run directories and reuse finished
//! runs on the next invocation.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stpnet::blocks::Ssm;
use stpnet::checkpoint::{load_checkpoint, read_checkpoint, write_checkpoint};
use stpnet::gradcheck::{failures, run_suite, SuiteConfig};
use stpnet::losses::{focal_loss, retrieval_loss};
use stpnet::metrics::EvalRecord;
use stpnet::retrieval::{recombine, retrieve, LocOrder};
use stpnet::synthgen::{batch_tensors, derive_text_labels, generate_sample, generate_split, GenConfig};
use stpnet::textbank::Category;
use stpnet::{Error, ForwardOptions, StpnetConfig, StpnetModel};
use stpnet_autodiff::reference::{max_abs_diff, naive_attention, naive_conv, naive_maxpool};
use stpnet_autodiff::{Conv2dSpec, Graph, ParamStore, Tape, Tensor};

const SEEDS: [u64; 3] = [0, 1, 2];
const DICE_MIN: f64 = 0.80;
const RETRIEVAL_MIN: f64 = 0.90;
const WALL_MAX_SECS: f64 = 30.0 * 60.0;
const NON_INFERIORITY: f64 = 0.005;

/// Default architecture on a handful of samples: cheap enough to train twice.
const SMALL: &str = "version = 1

[train]
epochs = 2
n_train = 24
n_val = 8
n_test = 8
";

struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn line(&mut self, n: usize, name: &str, pass: bool, detail: &str) {
        if !pass {
            self.failed.push(n);
        }
        say(&format!("criterion {n} {name}: {} {detail}", if pass { "PASS" } else { "FAIL" }));
    }
}

/// Straight to stdout so the lines show even when the harness captures output.
fn say(s: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{s}").unwrap();
    out.flush().unwrap();
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn gradient_suite(r: &mut Report) {
    let t0 = Instant::now();
    let out = run_suite(&StpnetConfig::reduced(), &SuiteConfig::default()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let failed = failures(&out);
    let named = ["enblock", "mtblock", "ssm", "utrans", "upblock", "retrieval_encoder", "seg_loss", "retrieval_loss", "focal_loss"];
    let thin: Vec<&str> = named.iter().copied().filter(|n| out.iter().find(|o| o.name == *n).map_or(true, |o| o.report.checked < 100)).collect();
    let worst = out.iter().filter(|o| named.contains(&o.name.as_str())).map(|o| o.report.max_rel_error).fold(0.0, f64::max);
    let detail = format!("{} checks, worst block/loss rel error {worst:.2e}, {secs:.1}s; failing {failed:?}; under 100 coords {thin:?}", out.len());
    r.line(1, "gradient suite", failed.is_empty() && thin.is_empty() && worst <= 1e-4 && secs <= 300.0, &detail);
}

fn oracle_equivalence(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut conv, mut pool, mut attn) = (0.0f64, 0.0f64, 0.0f64);
    let mut n_conv = 0;
    let dilations = [6, 12, 18, 1, 2];
    while n_conv < 50 {
        let depthwise = n_conv % 3 == 2;
        let groups = if depthwise { 4 } else { [1, 2][n_conv % 2] };
        let cin = if depthwise { 4 } else { groups * rng.gen_range(1..=2) };
        let cout = if depthwise { 4 } else { groups * rng.gen_range(1..=2) };
        let (h, w) = (rng.gen_range(3..=20), rng.gen_range(3..=20));
        let k = [1, 3][rng.gen_range(0..2)];
        let dilation = dilations[n_conv % dilations.len()];
        let padding = if k == 3 { [0, dilation][rng.gen_range(0..2)] } else { 0 };
        let spec = Conv2dSpec { stride: rng.gen_range(1..=2), padding, dilation, groups };
        if spec.output_size(h, k).is_none() || spec.output_size(w, k).is_none() {
            continue;
        }
        let shape = [rng.gen_range(1..=2), cin, h, w];
        let x = random(&mut rng, &shape);
        let wt = random(&mut rng, &[cout, cin / groups, k, k]);
        let b = random(&mut rng, &[cout]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()).unwrap(), tape.constant(wt.clone()).unwrap(), tape.constant(b.clone()).unwrap());
        let y = tape.conv2d(xv, wv, Some(bv), spec).unwrap();
        conv = conv.max(max_abs_diff(tape.value(y), &naive_conv(&x, &wt, Some(&b), spec)));
        n_conv += 1;
    }
    for case in 0..50 {
        let k = [2, 4][case % 2];
        let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), k * rng.gen_range(1..=4), k * rng.gen_range(1..=4)];
        let x = random(&mut rng, &shape);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let y = tape.maxpool2d(xv, k).unwrap();
        pool = pool.max(max_abs_diff(tape.value(y), &naive_maxpool(&x, k)));
    }
    for _ in 0..50 {
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let (b, t) = (rng.gen_range(1..=2), rng.gen_range(1..=8));
        let (dk, dv) = (heads * rng.gen_range(1..=3), heads * rng.gen_range(1..=3));
        let (q, k, v) = (random(&mut rng, &[b, t, dk]), random(&mut rng, &[b, t, dk]), random(&mut rng, &[b, t, dv]));
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()).unwrap(), tape.constant(k.clone()).unwrap(), tape.constant(v.clone()).unwrap());
        let a = tape.scaled_dot_attention(qv, kv, vv, heads).unwrap();
        attn = attn.max(max_abs_diff(tape.value(a.output), &naive_attention(&q, &k, &v, heads)));
    }
    let detail = format!("50 instances each, max abs diff conv {conv:.1e} maxpool {pool:.1e} attention {attn:.1e}");
    r.line(2, "oracle equivalence", conv <= 1e-6 && pool <= 1e-6 && attn <= 1e-6, &detail);
}

fn exact_special_cases(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut notes = Vec::new();

    let mut ssm_ok = true;
    for (seed, shape) in [(0u64, [2, 16, 16, 16]), (1, [1, 8, 8, 8]), (2, [2, 4, 5, 7])] {
        let mut st = ParamStore::<f32>::new(seed);
        let ssm = Ssm::new(&mut st, "ssm", shape[1], &[6, 12, 18]);
        let pid = ssm.proj_out.w;
        let zeros = Tensor::zeros(st.get(pid).shape());
        st.set(pid, zeros).unwrap();
        let x = random(&mut rng, &shape).cast::<f32>();
        let mut g = Graph::new(&mut st, true);
        let v = g.tape.constant(x.clone()).unwrap();
        let y = ssm.forward(&mut g, v).unwrap();
        ssm_ok &= g.tape.value(y).data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    notes.push(format!("ssm identity {}", if ssm_ok { "bit-exact" } else { "differs" }));

    let bank = StpnetConfig::default().text_bank().unwrap();
    let (mut first_ok, mut sums_err) = (true, 0.0f64);
    for _ in 0..200 {
        let f_v: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut res = retrieve(&f_v, &bank, 0.07).unwrap();
        for c in &res.categories {
            sums_err = sums_err.max((c.scores.scores.iter().sum::<f64>() - 1.0).abs());
        }
        let infection = res.categories[0].feature.tokens.clone();
        first_ok &= recombine(&mut res, LocOrder::LeftFirst).unwrap()[0] == infection;
    }
    notes.push(format!("first recombined level {}", if first_ok { "exact" } else { "differs" }));
    notes.push(format!("score sums off by {sums_err:.1e}"));

    let mut focal_err = 0.0f64;
    for _ in 0..50 {
        let (rows, k) = (rng.gen_range(1..=6), rng.gen_range(2..=8));
        let z = random(&mut rng, &[rows, k]).map(|v| 4.0 * v);
        let pos: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..k)).collect();
        let mut tape = Tape::<f64>::new();
        let zv = tape.constant(z.clone()).unwrap();
        let (f, _) = focal_loss(&mut tape, &[zv], &[&pos], 0.0).unwrap();
        let ce = z
            .data()
            .chunks(k)
            .zip(&pos)
            .map(|(row, &p)| row.iter().map(|x| x.exp()).sum::<f64>().ln() - row[p])
            .sum::<f64>()
            / rows as f64;
        focal_err = focal_err.max((tape.value(f).item() - ce).abs());
    }
    notes.push(format!("focal vs cross-entropy {focal_err:.1e}"));

    let mut single = 0.0f64;
    for _ in 0..20 {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(random(&mut rng, &[3, 5])).unwrap();
        let cand = random(&mut rng, &[1, 5]);
        let (l, _) = retrieval_loss(&mut tape, f, &[&cand], &[&[0, 0, 0]], 0.07).unwrap();
        single = single.max(tape.value(l).item().abs());
    }
    notes.push(format!("single-candidate retrieval loss {single:e}"));

    let pass = ssm_ok && first_ok && focal_err <= 1e-9 && single == 0.0 && sums_err <= 1e-6;
    r.line(3, "exact special cases", pass, &notes.join(", "));
}

fn self_retrieval(r: &mut Report) {
    let bank = StpnetConfig::default().text_bank().unwrap();
    let (mut hits, mut total) = (0, 0);
    for c in Category::ALL {
        for f in bank.features(c) {
            let res = retrieve(&f.pooled, &bank, 0.07).unwrap();
            hits += usize::from(res.categories[c.index()].scores.j_star == f.index);
            total += 1;
        }
    }
    r.line(4, "self-retrieval", hits == 20 && total == 20, &format!("{hits}/{total}"));
}

struct Run {
    test: EvalRecord,
    wall: f64,
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stpnet"));
    c.env("RUST_LOG", "info");
    c
}

/// One default desk run through the CLI, or the finished one already in `dir`.
fn desk_run(root: &Path, seed: u64, no_text: bool) -> Run {
    let dir = root.join(format!("{}-seed{seed}", if no_text { "no-text" } else { "full" }));
    let (test_json, wall_file) = (dir.join("test.json"), dir.join("wall_secs"));
    if !(test_json.exists() && wall_file.exists()) {
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let log = File::create(dir.join("train.log")).unwrap();
        let mut cmd = bin();
        cmd.args(["--seed", &seed.to_string(), "--out"]).arg(&dir);
        if no_text {
            cmd.arg("--no-text");
        }
        let t0 = Instant::now();
        let status = cmd.arg("train").stdout(Stdio::null()).stderr(log).status().unwrap();
        assert!(status.success(), "training run failed, see {}", dir.join("train.log").display());
        std::fs::write(&wall_file, format!("{}\n", t0.elapsed().as_secs_f64())).unwrap();
    }
    let test: EvalRecord = serde_json::from_str(&std::fs::read_to_string(&test_json).unwrap()).unwrap();
    let wall = std::fs::read_to_string(&wall_file).unwrap().trim().parse().unwrap();
    let run = Run { test, wall };
    say(&format!(
        "  {} seed {seed}: test dice {:.4}, retrieval top-1 {:?} (mean {:.4}), {:.1} min",
        if no_text { "no-text" } else { "full" },
        run.test.dice,
        run.test.retrieval_top1,
        run.test.mean_retrieval(),
        run.wall / 60.0
    ));
    run
}

fn end_to_end(r: &mut Report, full: &[Run]) {
    let mut notes = Vec::new();
    let mut pass = true;
    for (seed, run) in SEEDS.iter().zip(full) {
        let ok = (run.test.dice >= DICE_MIN, run.test.mean_retrieval() >= RETRIEVAL_MIN, run.wall <= WALL_MAX_SECS);
        pass &= ok.0 && ok.1 && ok.2;
        notes.push(format!("seed {seed} dice {} retrieval {} time {}", mark(ok.0), mark(ok.1), mark(ok.2)));
    }
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    notes.push(format!("timed on {cores} core(s)"));
    r.line(5, "synthetic end-to-end", pass, &notes.join("; "));
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "short"
    }
}

fn ablation(r: &mut Report, full: &[Run], no_text: &[Run]) {
    let mean = |runs: &[Run], f: &dyn Fn(&EvalRecord) -> f64| runs.iter().map(|x| f(&x.test)).sum::<f64>() / runs.len() as f64;
    let (d_full, d_none) = (mean(full, &|t| t.dice), mean(no_text, &|t| t.dice));
    let acc: Vec<f64> = (0..4).map(|c| mean(full, &|t| t.retrieval_top1[c])).collect();
    let above = Category::ALL.iter().zip(&acc).all(|(c, &a)| a > 1.0 / c.size() as f64);
    let detail = format!("mean dice full {d_full:.4} vs no-text {d_none:.4}; mean top-1 {acc:.3?} vs chance [0.5, 0.5, 0.125, 0.125]");
    r.line(6, "ablation direction", d_full >= d_none - NON_INFERIORITY && above, &detail);
}

fn eval_logits(model: &StpnetModel<f32>, img: &Tensor<f32>) -> Vec<u32> {
    let bank = model.cfg().text_bank().unwrap();
    let mut st = model.store.clone();
    let mut g = Graph::new(&mut st, false);
    let out = model.net.forward(&mut g, img, &bank, ForwardOptions::default(), None).unwrap();
    let mut bits: Vec<u32> = g.tape.value(out.logits).data().iter().map(|v| v.to_bits()).collect();
    bits.extend(g.tape.value(out.f_v).data().iter().map(|v| v.to_bits()));
    bits
}

fn round_trips(model: &StpnetModel<f32>, img: &Tensor<f32>) -> bool {
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, model).unwrap();
    let back: StpnetModel<f32> = read_checkpoint(&mut bytes.as_slice()).unwrap();
    eval_logits(model, img) == eval_logits(&back, img)
}

fn determinism(r: &mut Report, root: &Path, trained: &Path) {
    let mut notes = Vec::new();
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    let ckpts: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|d| {
            let out = bin().current_dir(tmp.path()).args(["--config", "small.toml", "--seed", "5", "--out", d, "train"]).output().unwrap();
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            std::fs::read(tmp.path().join(d).join("model.ckpt")).unwrap()
        })
        .collect();
    let same_train = ckpts[0] == ckpts[1];
    notes.push(format!("same-seed checkpoints {}", if same_train { "identical" } else { "differ" }));

    let gen = GenConfig::default();
    let split = generate_split(0, 1, 1, 4, &gen).unwrap();
    let refs: Vec<_> = split.test.iter().collect();
    let (img, _) = batch_tensors::<f32>(&refs).unwrap();
    let fresh = StpnetModel::<f32>::new(&StpnetConfig::default()).unwrap();
    let loaded: StpnetModel<f32> = load_checkpoint(trained).unwrap();
    let rt = round_trips(&fresh, &img) && round_trips(&loaded, &img);
    notes.push(format!("round-trip forward {}", if rt { "bit-identical" } else { "differs" }));

    let mut bad = std::fs::read(trained).unwrap();
    let at = bad.len() - 100;
    bad[at] ^= 0x40;
    let lib_err = matches!(read_checkpoint::<f32>(&mut bad.as_slice()), Err(Error::Integrity(_)));
    let bad_path = root.join("corrupt.ckpt");
    std::fs::write(&bad_path, &bad).unwrap();
    let out = bin().env("RUST_LOG", "warn").arg("--ckpt").arg(&bad_path).args(["--seed", "0", "eval"]).output().unwrap();
    let cli_err = out.status.code() == Some(2) && String::from_utf8_lossy(&out.stderr).contains("integrity");
    let _ = std::fs::remove_file(&bad_path);
    notes.push(format!("corrupt byte {}", if lib_err && cli_err { "integrity-error" } else { "not caught" }));
    r.line(7, "determinism and persistence", same_train && rt && lib_err && cli_err, &notes.join(", "));
}

fn labeler_consistency(r: &mut Report) {
    let cfg = GenConfig::default();
    let mut bad = 0;
    for seed in 0..10_000u64 {
        let s = generate_sample(seed, &cfg).unwrap();
        if derive_text_labels(&s.mask, &cfg).ok() != Some(s.labels) {
            bad += 1;
        }
    }
    r.line(8, "labeler consistency", bad == 0, &format!("{bad} disagreements in 10000 samples"));
}

#[test]
fn acceptance() {
    let mut r = Report { failed: Vec::new() };
    say("");
    let keep = std::env::var_os("STPNET_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    std::fs::create_dir_all(&root).unwrap();

    gradient_suite(&mut r);
    oracle_equivalence(&mut r);
    exact_special_cases(&mut r);
    self_retrieval(&mut r);

    let full: Vec<Run> = SEEDS.iter().map(|&s| desk_run(&root, s, false)).collect();
    let no_text: Vec<Run> = SEEDS.iter().map(|&s| desk_run(&root, s, true)).collect();
    end_to_end(&mut r, &full);
    ablation(&mut r, &full, &no_text);
    determinism(&mut r, &root, &root.join("full-seed0").join("model.ckpt"));
    labeler_consistency(&mut r);

    assert!(r.failed.is_empty(), "failed criteria: {:?}", r.failed);
}
