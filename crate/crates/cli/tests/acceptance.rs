//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Takes on the order of an hour on one core.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use rectattn::harness::{
    ablation_residual, evaluate, train, validation_eq_breakdown, zero_map_upstream_gradient, AttentionKind, Model,
    TrainConfig, TrainOutcome,
};
use rectattn::nn::ParamStore;
use rectattn::synthdata::{generate_dataset, Dataset, DatasetHeader};
use rectattn::verify::{run_all, VerifyOptions, VerifyReport};
use rectattn_cli::{cmd_train, METRICS_FILE};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn report(out: &mut Vec<Outcome>, id: &'static str, pass: bool, detail: String) {
    println!("{id} {} {detail}", if pass { "PASS" } else { "FAIL" });
    out.push(Outcome { id, pass, detail });
}

fn dataset(count: usize, seed: u64) -> Dataset {
    generate_dataset(DatasetHeader {
        classes: 4,
        channels: 1,
        height: 48,
        width: 48,
        count,
        seed,
    })
    .expect("dataset")
}

fn checks_pass(rep: &VerifyReport, names: &[&str]) -> (bool, String) {
    let mut pass = true;
    let mut parts = Vec::new();
    for name in names {
        match rep.checks.iter().find(|c| c.name == *name) {
            Some(c) => {
                pass &= c.pass;
                let vals: Vec<String> = c.values.iter().map(|(k, v)| format!("{k}={v:.3e}")).collect();
                parts.push(format!("{name}[{}]", vals.join(" ")));
            }
            None => {
                pass = false;
                parts.push(format!("{name}[missing]"));
            }
        }
    }
    (pass, parts.join(" "))
}

fn timed_train(cfg: &TrainConfig, tr: &Dataset, va: &Dataset, label: &str) -> TrainOutcome {
    let start = Instant::now();
    let out = train(cfg, tr, va).expect("training");
    let last = out.metrics.last().expect("at least one epoch");
    println!(
        "  {label} seed {}: val_acc {:.4} psi {:.4} eq {:.4} ({:.0}s)",
        cfg.seed,
        last.val_acc,
        last.mean_psi,
        last.mean_eq_loss,
        start.elapsed().as_secs_f64()
    );
    out
}

fn theory(out: &mut Vec<Outcome>) {
    let start = Instant::now();
    let rep = run_all(VerifyOptions { seed: 0, inject_fault: false }).expect("check battery");
    println!("  check battery: {:.1}s", start.elapsed().as_secs_f64());
    let groups: [(&'static str, &[&str]); 8] = [
        ("C1 gradient fidelity", &["gradient_layers", "gradient_rect_pipeline"]),
        ("C2 rescale invariant", &["rescale_sum"]),
        ("C3 fitting rate identity", &["fitting_rate_equals_iou"]),
        ("C4 relevance monotonicity", &["relevance_monotone_families", "relevance_monotone_explicit"]),
        ("C5 rademacher", &["rademacher_all_masks"]),
        ("C6 generalization bound", &["generalization_bound"]),
        ("C7 separation bounds", &["separation_bound_infimum", "separation_bound_disjoint"]),
        ("C8 equivariance consistency", &["equivariance_consistency"]),
    ];
    for (id, names) in groups {
        let (pass, detail) = checks_pass(&rep, names);
        report(out, id, pass, detail);
    }
}

fn experiments(out: &mut Vec<Outcome>) {
    let tr = dataset(2000, 1);
    let va = dataset(800, 2);
    let base = TrainConfig::default();

    let mut c9_ok = 0;
    let mut c10_ok = 0;
    let mut c9_rows = Vec::new();
    let mut c10_rows = Vec::new();
    for seed in SEEDS {
        let none = timed_train(
            &TrainConfig { attention_kind: AttentionKind::None, seed, ..base.clone() },
            &tr,
            &va,
            "none",
        );
        let rect = timed_train(
            &TrainConfig { attention_kind: AttentionKind::Rectangular, lambda_eq: 0.1, seed, ..base.clone() },
            &tr,
            &va,
            "rect lambda=0.1",
        );
        let plain = timed_train(
            &TrainConfig { attention_kind: AttentionKind::Rectangular, lambda_eq: 0.0, seed, ..base.clone() },
            &tr,
            &va,
            "rect lambda=0",
        );

        let acc_none = evaluate(&none.model, &none.store, &va).expect("eval").accuracy;
        let rep = evaluate(&rect.model, &rect.store, &va).expect("eval");
        let ok9 = rep.accuracy >= acc_none - 0.01 && rep.mean_psi >= 0.6;
        c9_ok += ok9 as usize;
        c9_rows.push(format!("s{seed}:acc {:.4}/{:.4} psi {:.3}", rep.accuracy, acc_none, rep.mean_psi));

        let with = validation_eq_breakdown(&rect.model, &rect.store, &va).expect("eq");
        let without = validation_eq_breakdown(&plain.model, &plain.store, &va).expect("eq");
        println!(
            "  seed {seed} eq breakdown (mu, sigma, alpha): lambda=0.1 ({:.5}, {:.5}, {:.5}) lambda=0 ({:.5}, {:.5}, {:.5})",
            with.center, with.extent, with.angle, without.center, without.extent, without.angle
        );
        c10_ok += (with.total() < without.total()) as usize;
        c10_rows.push(format!("s{seed}:{:.4}<{:.4}", with.total(), without.total()));
    }
    report(out, "C9 desk-scale accuracy and catching rate", c9_ok >= 4, format!("{c9_ok}/5 [{}]", c9_rows.join(" ")));
    report(out, "C10 equivariance constraint effect", c10_ok >= 4, format!("{c10_ok}/5 [{}]", c10_rows.join(" ")));

    // the loss being compared is cross-entropy alone, so the ablation leaves
    // the equivariance term off
    let cfg = TrainConfig { epochs: 5, lambda_eq: 0.0, ..base.clone() };
    let start = Instant::now();
    let abl = ablation_residual(&cfg, &tr, &va, &SEEDS).expect("ablation");
    println!("  ablation: {:.0}s", start.elapsed().as_secs_f64());
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let res = abl.run(seed, true).expect("run");
        let non = abl.run(seed, false).expect("run");
        let (a, b) = (res.train_losses[4], non.train_losses[4]);
        wins += (a <= b) as usize;
        rows.push(format!("s{seed}:{a:.4}<={b:.4} psi0 {:.3}", res.initial_psi));
    }

    let probe_cfg = TrainConfig { attention_kind: AttentionKind::Rectangular, ..base.clone() };
    let (x, labels) = va.batch(&[0, 1, 2, 3]).expect("batch");
    let probe = |use_residual: bool| -> f64 {
        let mut store = ParamStore::new();
        let model = Model::new(&TrainConfig { use_residual, ..probe_cfg.clone() }, &va.header, &mut store).expect("model");
        zero_map_upstream_gradient(&model, &store, &x, &labels).expect("probe")
    };
    let (g_non, g_res) = (probe(false), probe(true));
    let exact = g_non == 0.0 && g_res > 0.0;
    report(
        out,
        "C11 residual ablation",
        wins >= 4 && exact,
        format!("{wins}/5 [{}] zero-map grad non-residual {g_non:e} residual {g_res:.3e}", rows.join(" ")),
    );
}

fn determinism(out: &mut Vec<Outcome>) {
    let dir = tempfile::TempDir::new().expect("tempdir");
    let small = |count, seed| {
        generate_dataset(DatasetHeader { classes: 4, channels: 1, height: 48, width: 48, count, seed }).expect("dataset")
    };
    let (tr, va) = (dir.path().join("train.bin"), dir.path().join("val.bin"));
    rectattn::synthdata::write_dataset(&tr, &small(200, 1)).expect("write");
    rectattn::synthdata::write_dataset(&va, &small(100, 2)).expect("write");
    let csvs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let run_dir = dir.path().join(name);
            let cfg = dir.path().join(format!("{name}.json"));
            let text = format!(
                r#"{{"train_set": {tr:?}, "val_set": {va:?}, "out_dir": {run_dir:?}, "seed": 7, "epochs": 2,
                    "attention_kind": "rectangular", "lambda_eq": 0.1}}"#
            );
            fs::write(&cfg, text).expect("config");
            cmd_train(&cfg, &mut Vec::new()).expect("train");
            fs::read(run_dir.join(METRICS_FILE)).expect("csv")
        })
        .collect();
    let rows = csvs[0].iter().filter(|&&b| b == b'\n').count() - 1;
    report(out, "C12 determinism", csvs[0] == csvs[1], format!("{rows} rows, {} bytes", csvs[0].len()));
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut out = Vec::new();
    theory(&mut out);
    determinism(&mut out);
    experiments(&mut out);
    // keep criterion order in the summary
    out.sort_by_key(|o| o.id.split_whitespace().next().and_then(|c| c[1..].parse::<u32>().ok()));
    println!("summary ({:.0}s):", start.elapsed().as_secs_f64());
    for o in &out {
        println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.detail);
    }
    if out.iter().all(|o| o.pass) {
        ExitCode::SUCCESS
    } else {
        let failed: Vec<&str> = out.iter().filter(|o| !o.pass).map(|o| o.id).collect();
        eprintln!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
