mod common;

use std::path::Path;
use std::process::{Command, Output};

use deepdeblur::config::PipelineConfig;
use deepdeblur::imaging::{load_png, save_png, synthetic_face, Image};
use deepdeblur::kernels::{load_kernel, save_kernel, MotionKernel};
use deepdeblur::model::{DeepDeblurNet, Restorer};
use deepdeblur::training::{save_checkpoint, Checkpoint, FINAL_CHECKPOINT};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepdeblur")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synth_kernels_writes_count_and_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["synth-kernels", "--count", "3", "--out", s(out), "--seed", "4", "--preview", "--threads", "2"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("gp.valid_size = 8,20"));
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names, ["kernel_0000.mkern", "kernel_0001.mkern", "kernel_0002.mkern", "preview.png"]);
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n:?}");
    }
    let k = load_kernel(a.join("kernel_0001.mkern")).unwrap();
    assert!((8..=20).contains(&k.valid_size()));
    assert!((k.sum() - 1.0).abs() < 1e-9);

    // Thread count does not change the output.
    let c = dir.path().join("c");
    assert!(run(&["synth-kernels", "--count", "3", "--out", s(&c), "--seed", "4", "--threads", "1"]).status.success());
    assert_eq!(std::fs::read(c.join("kernel_0002.mkern")).unwrap(), std::fs::read(a.join("kernel_0002.mkern")).unwrap());
}

#[test]
fn blur_delta_noise_and_missing_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("in.png");
    save_png(&synthetic_face(40, 36, 2).unwrap(), &img).unwrap();
    let delta = dir.path().join("delta.mkern");
    save_kernel(&MotionKernel::delta(9), &delta).unwrap();

    let out = dir.path().join("out.png");
    assert!(run(&["blur", "--in", s(&img), "--kernel", s(&delta), "--out", s(&out)]).status.success());
    assert_eq!(load_png(&out).unwrap(), load_png(&img).unwrap());

    let (n1, n2) = (dir.path().join("n1.png"), dir.path().join("n2.png"));
    for n in [&n1, &n2] {
        let o = run(&["blur", "--in", s(&img), "--kernel", s(&delta), "--out", s(n), "--noise", "0.05", "--seed", "9"]);
        assert!(o.status.success());
    }
    assert_eq!(std::fs::read(&n1).unwrap(), std::fs::read(&n2).unwrap());
    assert_ne!(std::fs::read(&n1).unwrap(), std::fs::read(&out).unwrap());

    let o = run(&["blur", "--in", s(&img), "--kernel", s(&dir.path().join("nope.mkern")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.mkern"));
}

#[test]
fn usage_errors() {
    assert_eq!(run(&["blur", "--in", "x.png", "--unknown"]).status.code(), Some(1));
    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&["nonsense"]).status.code(), Some(1));
    for sub in ["synth-kernels", "blur", "train", "deblur", "eval", "bench", "dump-features"] {
        let o = run(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("--"), "{sub}");
    }
    let train_help = stdout(&run(&["train", "--help"]));
    assert!(train_help.contains("[train.max_steps]") && train_help.contains("[train.seed]"));
}

#[test]
fn train_zero_steps_then_deblur_matches_untrained_forward() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.net.num_modules = 1;
    cfg.net.base_channels = 4;
    cfg.net.scales = vec![1, 3];
    cfg.train.image_size = (24, 20);
    cfg.train.gp.canvas = 9;
    cfg.train.gp.valid_size_range = (3, 7);
    let cfg_path = dir.path().join("run.conf");
    std::fs::write(&cfg_path, cfg.to_text()).unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    let face = synthetic_face(24, 20, 0).unwrap();
    save_png(&face, data.join("f.png")).unwrap();

    let ckdir = dir.path().join("ck");
    let o = run(&[
        "train", "--data", s(&data), "--config", s(&cfg_path), "--out", s(&ckdir), "--max-steps", "0", "--seed", "7",
        "--set", "loss.alpha=0.5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("train.max_steps = 0") && text.contains("loss.alpha = 0.5") && text.contains("train.seed = 7"));

    let ckpt = ckdir.join(FINAL_CHECKPOINT);
    let out = dir.path().join("restored.png");
    let input = data.join("f.png");
    assert!(run(&["deblur", "--ckpt", s(&ckpt), "--in", s(&input), "--out", s(&out)]).status.success());
    let net = DeepDeblurNet::new(cfg.net.clone(), 7).unwrap();
    let expected = net.restore(&load_png(&input).unwrap()).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    let exp_path = dir2.path().join("e.png");
    save_png(&expected, &exp_path).unwrap();
    assert_eq!(load_png(&out).unwrap(), load_png(&exp_path).unwrap());

    // Grayscale in, grayscale out.
    let gray = dir.path().join("gray.png");
    save_png(&face.to_gray(), &gray).unwrap();
    let gout = dir.path().join("gout.png");
    assert!(run(&["deblur", "--ckpt", s(&ckpt), "--in", s(&gray), "--out", s(&gout)]).status.success());
    let g = load_png(&gout).unwrap();
    assert_eq!((g.height(), g.width(), g.channels()), (24, 20, 1));

    // Short training run, then dump features.
    let o = run(&["train", "--data", s(&data), "--config", s(&cfg_path), "--out", s(&ckdir), "--max-steps", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let feats = dir.path().join("feats");
    let o = run(&["dump-features", "--ckpt", s(&ckpt), "--in", s(&input), "--module", "0", "--out", s(&feats)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(feats.join("module0_branch1_3x3.png").exists());
    let o = run(&["dump-features", "--ckpt", s(&ckpt), "--in", s(&input), "--module", "5", "--out", s(&feats)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_and_bench_with_identity_stub() {
    let dir = tempfile::tempdir().unwrap();
    let stub = dir.path().join("stub.ddblr");
    save_checkpoint(&Checkpoint::identity_stub(), &stub).unwrap();
    let data = dir.path().join("faces");
    let kdir = dir.path().join("kernels");
    std::fs::create_dir_all(&data).unwrap();
    for i in 0..2 {
        save_png(&synthetic_face(40, 36, i).unwrap(), data.join(format!("{i}.png"))).unwrap();
    }
    assert!(run(&["synth-kernels", "--count", "2", "--out", s(&kdir), "--canvas", "15", "--valid-min", "5", "--valid-max", "9"])
        .status
        .success());
    save_kernel(&MotionKernel::delta(15), kdir.join("zz_delta.mkern")).unwrap();

    let report = dir.path().join("r.csv");
    let o = run(&["eval", "--ckpt", s(&stub), "--data", s(&data), "--kernels", s(&kdir), "--report", s(&report), "--noise", "0.01"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("restored dB"));
    let csv = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "kernel,images,excluded,blurry_psnr,restored_psnr");
    assert_eq!(lines.len(), 5);
    for l in &lines[1..] {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f[3], f[4], "{l}");
    }

    let img = data.join("0.png");
    let o = run(&["bench", "--ckpt", s(&stub), "--in", s(&img), "--reps", "3"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("n 3"));
}

#[test]
fn stub_restorer_is_identity() {
    let img = Image::filled(4, 4, 3, 0.25).unwrap();
    let r = Checkpoint::identity_stub().restorer().unwrap();
    assert_eq!(r.restore(&img).unwrap(), img);
}
