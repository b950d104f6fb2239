//! Round trips of checkpoints, bases, datasets and images, and the exit-code mapping.

use fldr::checkpoint::{load_basis, load_checkpoint, save_basis, save_checkpoint};
use fldr::dataset::{load_dataset, save_dataset};
use fldr::error::exit;
use fldr::io::{frame_name, list_frames, read_image, write_image, BitDepth};
use fldr::FldrError;
use fldr_core::synthetic::{dead_leaves, make_synthetic_dataset};
use fldr_core::training::{initial_model, ModelCheckpoint, TrainConfig};

fn checkpoint() -> ModelCheckpoint {
    let cfg = TrainConfig { epochs: 3, lr_main: 2e-4, seed: 17, ..TrainConfig::desk() };
    let mut model = initial_model(&cfg, &dead_leaves::<f32>(1, 64, 64)).unwrap();
    model.alpha = 1.25;
    model.temperature = 0.8;
    ModelCheckpoint { model, config: cfg, epoch: 2, score: 31.5 }
}

#[test]
fn checkpoint_round_trip_is_exact_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint();
    let (a, b) = (dir.path().join("a.safetensors"), dir.path().join("nested/b.safetensors"));
    save_checkpoint(&a, &ck).unwrap();
    save_checkpoint(&b, &ck).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let back = load_checkpoint(&a).unwrap();
    assert_eq!(back.config, ck.config);
    assert_eq!((back.epoch, back.score), (ck.epoch, ck.score));
    assert_eq!(back.model.named_tensors(), ck.model.named_tensors());

    // Saving what was loaded reproduces the file.
    let c = dir.path().join("c.safetensors");
    save_checkpoint(&c, &back).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn corrupt_checkpoints_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.safetensors");
    std::fs::write(&p, b"not a checkpoint").unwrap();
    assert_eq!(load_checkpoint(&p).unwrap_err().exit_code(), exit::DATA);
    assert_eq!(load_checkpoint(&dir.path().join("missing")).unwrap_err().exit_code(), exit::DATA);
    let basis = dir.path().join("basis.safetensors");
    save_basis(&basis, &checkpoint().model.basis).unwrap();
    assert_eq!(load_checkpoint(&basis).unwrap_err().exit_code(), exit::DATA);
}

#[test]
fn basis_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let basis = checkpoint().model.basis;
    let p = dir.path().join("basis.safetensors");
    save_basis(&p, &basis).unwrap();
    let back = load_basis(&p).unwrap();
    assert_eq!((back.d(), back.k()), (basis.d(), basis.k()));
    assert_eq!(back.u, basis.u);
    assert_eq!(back.mean, basis.mean);
}

#[test]
fn dataset_round_trip_within_sixteen_bit_quantisation() {
    let dir = tempfile::tempdir().unwrap();
    let set = make_synthetic_dataset::<f32>(5, 3, 16, 4.0);
    save_dataset(dir.path(), &set).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), set.len());
    for (a, b) in set.iter().zip(&back) {
        assert_eq!((a.t, a.flow), (b.t, b.flow));
        for (x, y) in [(&a.i0, &b.i0), (&a.it, &b.it), (&a.i1, &b.i1)] {
            assert!(x.max_abs_diff(y) <= 0.5 / 65535.0 + 1e-7);
        }
    }
}

#[test]
fn images_round_trip_at_both_depths() {
    let dir = tempfile::tempdir().unwrap();
    let img = dead_leaves::<f32>(9, 20, 28);
    for (depth, step) in [(BitDepth::Eight, 255.0f32), (BitDepth::Sixteen, 65535.0)] {
        let p = dir.path().join(format!("img{step}.png"));
        write_image(&p, &img, depth).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(back.chw(), (3, 20, 28));
        assert!(back.max_abs_diff(&img) <= 0.5 / step + 1e-6);
    }
}

#[test]
fn frames_are_listed_in_lexicographic_order() {
    let dir = tempfile::tempdir().unwrap();
    let img = dead_leaves::<f32>(2, 8, 8);
    for i in [10, 2, 0] {
        write_image(&dir.path().join(frame_name(i)), &img, BitDepth::Eight).unwrap();
    }
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let names: Vec<String> =
        list_frames(dir.path()).unwrap().iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["frame_000000.png", "frame_000002.png", "frame_000010.png"]);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    assert_eq!(FldrError::from(fldr_core::Error::NonFinite("loss".into())).exit_code(), exit::NUMERIC);
    assert_eq!(FldrError::from(fldr_core::Error::Config("k > d²".into())).exit_code(), exit::USAGE);
    assert_eq!(FldrError::Usage("bad flag".into()).exit_code(), exit::USAGE);
    assert_eq!(FldrError::Data("short sequence".into()).exit_code(), exit::DATA);
    assert_eq!(exit::OK, 0);
}
