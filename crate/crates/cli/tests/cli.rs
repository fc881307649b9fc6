use std::path::Path;
use std::process::{Command, Output};

use vitgaze::data::synthetic::synthetic_scene;
use vitgaze::data::{sample_rng, write_manifest, GazeSample};
use vitgaze::viz::save_png;

const TINY: &str = r#"
seed = 3

[model]
guidance_hidden = 8
heatmap_channels = [4, 4, 2]
inout_hidden = 8

[model.vit]
embed_dim = 16
depth = 2
num_heads = 2
mlp_ratio = 2.0
patch_size = 14
pos_grid = 4
capture_layers = [1, 2]
layer_scale_init = 1.0

[train]
epochs = 1
batch_size = 2
base_resolution = 28
final_epoch_resolution = 28
base_lr = 0.001
final_lr = 0.0001
"#;

fn vitgaze(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitgaze"))
        .args(args)
        .env_remove("VITGAZE_DEVICE")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_scenes(dir: &Path, n: usize) -> Vec<GazeSample> {
    std::fs::create_dir_all(dir.join("img")).unwrap();
    (0..n)
        .map(|i| {
            let name = format!("img/s{i}.png");
            let (img, mut s) = synthetic_scene(56, 4.0, &name, &mut sample_rng(8, i as u64));
            save_png(&dir.join(&name), &img.mapv(f64::from)).unwrap();
            if i == n - 1 {
                s.inside = false;
                s.gaze_points.clear();
            }
            s
        })
        .collect()
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: std::path::PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let samples = write_scenes(&root, 4);
        write_manifest(root.join("m.jsonl"), &samples).unwrap();
        std::fs::write(root.join("tiny.toml"), TINY).unwrap();
        Self { _tmp: tmp, root }
    }

    fn p(&self, rel: &str) -> String {
        self.root.join(rel).display().to_string()
    }

    fn trained(&self) -> String {
        let o = vitgaze(&[
            "train",
            "--config",
            &self.p("tiny.toml"),
            "--manifest",
            &self.p("m.jsonl"),
            "--out",
            &self.p("run"),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o).trim().to_string()
    }
}

#[test]
fn train_eval_predict_visualize_finetune() {
    let ws = Workspace::new();
    let ck = ws.trained();
    assert!(Path::new(&ck).exists());
    assert!(ws.root.join("run/train_log.jsonl").exists());

    let eval = |out: &str| vitgaze(&["eval", "--checkpoint", &ck, "--manifest", &ws.p("m.jsonl"), "--out", out]);
    let (a, b) = (eval(&ws.p("r1.txt")), eval(&ws.p("r2.txt")));
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).starts_with("auc "));
    assert!(stdout(&a).contains("\nap "));
    assert!(stderr(&a).contains("# resolved config"));

    let predict = || {
        vitgaze(&[
            "predict",
            "--checkpoint",
            &ck,
            "--image",
            &ws.p("img/s0.png"),
            "--head",
            "0.1,0.1,0.3,0.3",
            "--out",
            &ws.p("heat.png"),
        ])
    };
    let (a, b) = (predict(), predict());
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    let rec: serde_json::Value = serde_json::from_str(stdout(&a).trim()).unwrap();
    for key in ["gaze_x", "gaze_y", "p_out"] {
        assert!(rec[key].is_f64(), "{key} missing in {rec}");
    }
    assert!(ws.root.join("heat.png").exists());

    let v = vitgaze(&["visualize", "--checkpoint", &ck, "--manifest", &ws.p("m.jsonl"), "--index", "1", "--out", &ws.p("viz")]);
    assert!(v.status.success(), "{}", stderr(&v));
    let files: Vec<String> = stdout(&v).lines().map(str::to_string).collect();
    assert_eq!(files.len(), 4);
    assert!(files.iter().all(|f| Path::new(f).exists()));

    let f = vitgaze(&[
        "finetune",
        "--checkpoint",
        &ck,
        "--manifest",
        &ws.p("m.jsonl"),
        "--out",
        &ws.p("ft"),
    ]);
    assert!(f.status.success(), "{}", stderr(&f));
    assert!(stderr(&f).contains("lr 1.000e-4"));
}

#[test]
fn bad_head_box_is_a_validation_error_with_hint() {
    let o = vitgaze(&["predict", "--checkpoint", "x", "--image", "y.png", "--head", "0.2,0.2,1.4,0.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("hint: --head"));
    let o = vitgaze(&["predict", "--checkpoint", "x", "--image", "y.png", "--head", "0.2,0.2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let ws = Workspace::new();
    let o = vitgaze(&["train", "--manifest", &ws.p("m.jsonl"), "--out", &ws.p("run"), "--set", "train.epoch=2"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let ws = Workspace::new();
    let o = vitgaze(&["eval", "--checkpoint", &ws.p("nope.safetensors"), "--manifest", &ws.p("m.jsonl")]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn only_cpu_is_available() {
    let o = vitgaze(&["--device", "cuda", "eval"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cpu"));
}

#[test]
fn convert_gazefollow_annotations() {
    let tmp = tempfile::tempdir().unwrap();
    write_scenes(tmp.path(), 2);
    // 56×56 images: a 14-pixel head box at (14, 14)
    let csv = "img/s0.png,0,0,0,1,1,0.3,0.3,0.7,0.6,14,14,28,28,1,0,0\n\
               img/s1.png,1,0,0,1,1,0.3,0.3,0.5,0.5,14,14,28,28,-1,0,0\n";
    std::fs::write(tmp.path().join("ann.txt"), csv).unwrap();
    let out = tmp.path().join("m.jsonl");
    let o = vitgaze(&[
        "convert",
        "--format",
        "gazefollow",
        "--input",
        &tmp.path().join("ann.txt").display().to_string(),
        "--image-root",
        &tmp.path().display().to_string(),
        "--out",
        &out.display().to_string(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = vitgaze::data::load_manifest(&out).unwrap();
    assert_eq!(m.len(), 1);
    assert_eq!(m[0].head.to_array(), [0.25, 0.25, 0.5, 0.5]);
    assert!(stderr(&o).contains("1 rows skipped"));
}
