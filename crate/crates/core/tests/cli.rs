//! The command-line surface, driven in-process.

use sinefm::cli::run_with;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("sinefm").chain(args.iter().copied());
    let code = run_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

#[test]
fn flops_compare_prints_ratio_row() {
    let (code, out, _) = run(&["flops", "--arch", "tiny-vgg", "--hw", "32", "32", "--compare-standard"]);
    assert_eq!(code, 0);
    let ratio = out.lines().find(|l| l.starts_with("ratio,")).expect("ratio row");
    let fields: Vec<f64> = ratio.split(',').skip(5).map(|v| v.parse().unwrap()).collect();
    assert!(fields[0] >= 3.0 && fields[1] >= 2.0, "{ratio}");
    let (code, out, _) = run(&["flops", "--arch", "resnet50", "--format", "json"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["total_flops"].as_u64().unwrap() > 3_000_000_000);
}

#[test]
fn gradcheck_sinusoidal_passes() {
    let (code, out, _) = run(&["gradcheck", "--family", "sinusoidal"]);
    assert_eq!(code, 0, "{out}");
    let err: f64 = out.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!(err < 1e-4);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["flops", "--arch", "tiny-vgg", "--frobnicate"]).0, 1);
    assert_eq!(run(&["launch"]).0, 1);
    assert_eq!(run(&["flops", "--arch", "no-such-net"]).0, 1);
    assert_eq!(run(&["sample-hparams", "--seed", "1", "--family", "zeta", "--count", "2"]).0, 1);
}

#[test]
fn every_subcommand_documents_its_flags() {
    for sub in ["train", "eval", "flops", "pack", "unpack", "gradcheck", "ablate", "sweep", "sample-hparams"] {
        let (code, out, _) = run(&[sub, "--help"]);
        assert_eq!(code, 0, "{sub}");
        assert!(out.contains("Usage"), "{sub}");
    }
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("sample-hparams"));
}

#[test]
fn pack_unpack_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let pack = dir.path().join("m.sfm");
    let state = dir.path().join("m.json");
    let repack = dir.path().join("m2.sfm");
    let p = |q: &std::path::Path| q.to_str().unwrap().to_string();

    let desc = dir.path().join("net.txt");
    std::fs::write(&desc, "input 3 8 8\nconv 3 8 3 1 1\nrelu\nsinefm 8 32 8 3 1 1 4 hermite 77\ngap\ndense 32 3\n").unwrap();
    assert_eq!(run(&["pack", "--arch", &p(&desc), "--seed", "4", "--out", &p(&pack)]).0, 0);
    assert_eq!(run(&["unpack", "--input", &p(&pack), "--out", &p(&state)]).0, 0);
    assert_eq!(run(&["pack", "--state", &p(&state), "--out", &p(&repack)]).0, 0);
    assert_eq!(std::fs::read(&pack).unwrap(), std::fs::read(&repack).unwrap());

    let (code, out, _) = run(&["unpack", "--input", &p(&pack), "--hex-dump", "--size-report"]);
    assert_eq!(code, 0);
    assert!(out.contains("checksum") && out.contains("standard_bytes"));

    let mut bytes = std::fs::read(&pack).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&pack, &bytes).unwrap();
    let (code, _, err) = run(&["unpack", "--input", &p(&pack)]);
    assert_eq!(code, 3);
    assert!(err.contains("checksum") && err.contains("offset"), "{err}");

    std::fs::write(&pack, &bytes[..mid]).unwrap();
    assert_eq!(run(&["unpack", "--input", &p(&pack)]).0, 2);

    std::fs::write(&desc, "input 3 8 8\nconv 4 8 3 1 1\n").unwrap();
    let (code, _, err) = run(&["flops", "--arch", &p(&desc)]);
    assert_eq!(code, 2);
    assert!(err.contains("layer 0"), "{err}");
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let pack = dir.path().join("m.sfm");
    let hist = dir.path().join("h.csv");
    let args = [
        "train", "--arch", "tiny-vgg", "--sinefm", "--data", "synth-class", "--train-count", "64", "--test-count",
        "32", "--epochs", "2", "--lr", "3e-3", "--seed", "9", "--out", pack.to_str().unwrap(), "--history",
        hist.to_str().unwrap(),
    ];
    let (code, out, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("test_accuracy"));
    assert_eq!(std::fs::read_to_string(&hist).unwrap().lines().count(), 3);
    let first = std::fs::read(&pack).unwrap();
    assert_eq!(run(&args).0, 0);
    assert_eq!(std::fs::read(&pack).unwrap(), first);

    let eval = |threads: &str| {
        run(&[
            "eval", "--model", pack.to_str().unwrap(), "--test-count", "32", "--train-count", "64", "--seed", "9",
            "--format", "csv", "--threads", threads,
        ])
    };
    let (code, one, _) = eval("1");
    assert_eq!(code, 0);
    assert_eq!(eval("3").1, one);
}

#[test]
fn sample_hparams_golden() {
    let (code, out, _) = run(&["sample-hparams", "--seed", "42", "--family", "sinusoidal", "--count", "2"]);
    assert_eq!(code, 0);
    assert_eq!(
        out,
        "channel,omega,psi\n0,1.0838629710598822,2.5159210026506744\n1,1.6800434110281395,4.69877178130155\n"
    );
    let (code, out, _) = run(&["sample-hparams", "--seed", "1", "--family", "legendre", "--count", "3", "--bounds", "2:2"]);
    assert_eq!(code, 0);
    assert_eq!(out, "channel,degree\n0,2\n1,2\n2,2\n");
}

#[test]
fn sweep_and_ablate_small() {
    let common = ["--train-count", "32", "--test-count", "16", "--epochs", "1", "--seed", "3"];
    let mut args = vec!["sweep", "--axis", "fanout", "--values", "1,2"];
    args.extend(common);
    let (code, out, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 3);
    assert_eq!(run(&args).1, out);

    let mut args = vec!["ablate", "--families", "sinusoidal,gaussian", "--trials", "1", "--summary"];
    args.extend(common);
    let (code, out, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("family,trial,seed,metric\n"));
    assert!(out.contains("rank,family,mean,std"));
}
