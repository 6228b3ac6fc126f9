import csv
import json

import numpy as np
import pytest

from mgcn.checkpoint import file_digest, load_container
from mgcn.cli import main
from mgcn.config import toy_config
from mgcn.mesh import load_mesh, save_mesh


def tiny_config(out_dir, seed=0, **over):
    cfg = toy_config(str(out_dir), seed)
    cfg["hierarchy"].update(base_level=2)
    cfg["data"].update(train_count=12, val_count=4)
    cfg["render"].update(width=32, height=32, focal=70.0)
    cfg["autoencoder"].update(epochs=3, cheb_order=2, latent_size=4, batch_size=4)
    cfg["encoder2d"].update(image_size=[32, 32], widths=[4, 6], strides=[2, 2], branch_dim=8, global_dim=8,
                            tap_channels=2, latent_size=4, epochs=2, batch_size=4)
    for k, v in over.items():
        cfg[k].update(v)
    return cfg


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    conf = write_config(root / "cfg.json", tiny_config(root / "out"))
    for cmd in ("generate", "train-ae", "train-2d"):
        assert main([cmd, "--config", conf, "--deterministic"]) == 0
    return root, conf


def test_generate_is_deterministic(tmp_path):
    digests = []
    for name in ("a", "b"):
        conf = write_config(tmp_path / f"{name}.json", tiny_config(tmp_path / name))
        assert main(["generate", "--config", conf]) == 0
        data = tmp_path / name / "data"
        digests.append({p.relative_to(data).as_posix(): file_digest(p) for p in sorted(data.rglob("*"))
                        if p.is_file() and p.name != "manifest.json"})
    assert digests[0] == digests[1]
    assert len([k for k in digests[0] if k.endswith(".pgm")]) == 16


def test_train_and_reconstruct(trained, tmp_path, capsys):
    root, conf = trained
    out = root / "out"
    for name in ("autoencoder/autoencoder.mgcn", "autoencoder/history.json", "encoder2d/encoder2d.mgcn",
                 "encoder2d/history.json"):
        assert (out / name).exists()
    history = json.loads((out / "autoencoder/history.json").read_text())
    assert len(history["epochs"]) == 3
    capsys.readouterr()
    assert main(["reconstruct", "--config", conf, "--image", str(out / "data/val/00000.pgm"),
                 "--out", str(tmp_path / "r.obj")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert len(info["latent"]) == 4
    mesh = load_mesh(tmp_path / "r.obj")
    assert mesh.vertices.shape == (162, 3)
    assert np.isfinite(mesh.vertices).all()


def test_resume_matches_uninterrupted(tmp_path):
    conf = write_config(tmp_path / "c.json", tiny_config(tmp_path / "out"))
    assert main(["generate", "--config", conf]) == 0
    assert main(["train-ae", "--config", conf, "--deterministic"]) == 0
    full = (tmp_path / "out/autoencoder/history.json").read_text()
    full_ckpt = file_digest(tmp_path / "out/autoencoder/autoencoder.mgcn")
    (tmp_path / "out/autoencoder/last_state.mgcn").unlink()
    assert main(["train-ae", "--config", conf, "--deterministic", "--stop-after", "1"]) == 0
    assert main(["train-ae", "--config", conf, "--deterministic", "--resume"]) == 0
    assert (tmp_path / "out/autoencoder/history.json").read_text() == full
    assert file_digest(tmp_path / "out/autoencoder/autoencoder.mgcn") == full_ckpt


def test_resume_with_other_config_is_rejected(trained, tmp_path):
    root, _ = trained
    cfg = tiny_config(root / "out")
    cfg["autoencoder"]["lr"] = 0.5
    conf = write_config(tmp_path / "other.json", cfg)
    assert main(["train-ae", "--config", conf, "--resume"]) == 3


def test_evaluate_self_is_zero(trained, tmp_path):
    root, _ = trained
    base = load_mesh(root / "out/data/base.obj")
    path = tmp_path / "scan.obj"
    save_mesh(base, path)
    assert main(["evaluate", "--recon", str(path), "--scan", str(path), "--out", str(tmp_path / "rep.json")]) == 0
    report = json.loads((tmp_path / "rep.json").read_text())
    assert report["combined"] == pytest.approx(0.0, abs=1e-9)
    assert (tmp_path / "rep_errors.ply").exists()


def test_evaluate_unknown_landmark(trained, tmp_path):
    root, _ = trained
    base = load_mesh(root / "out/data/base.obj")
    path = tmp_path / "scan.obj"
    save_mesh(base, path)
    code = main(["evaluate", "--recon", str(path), "--scan", str(path), "--out", str(tmp_path / "r.json"),
                 "--landmarks", "nose_tip,chin,elbow"])
    assert code == 2


def test_ablate_writes_csv(trained, tmp_path):
    root, conf = trained
    out = tmp_path / "abl.csv"
    assert main(["ablate", "--config", conf, "--sweep", "latent_sizes", "--values", "2,4", "--out", str(out),
                 "--deterministic"]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["sweep", "value", "val_mee_mean", "val_mee_std", "val_count", "best_epoch"]
    assert [r[1] for r in rows[1:]] == ["2", "4"]
    assert all(int(r[4]) == 4 for r in rows[1:])
    out2 = tmp_path / "taps.csv"
    assert main(["ablate", "--config", conf, "--sweep", "tap_sets", "--values", "none;0,1", "--out", str(out2),
                 "--deterministic"]) == 0
    assert [r[1] for r in list(csv.reader(out2.open()))[1:]] == ["none", "0+1"]


def test_exit_codes(tmp_path, trained):
    root, conf = trained
    bad = dict(tiny_config(tmp_path / "x"))
    bad["autoencoder"]["unknown_key"] = 1
    assert main(["generate", "--config", write_config(tmp_path / "bad.json", bad)]) == 2
    mismatch = tiny_config(tmp_path / "x")
    mismatch["encoder2d"]["latent_size"] = 7
    assert main(["generate", "--config", write_config(tmp_path / "mm.json", mismatch)]) == 2
    assert main(["generate", "--config", str(tmp_path / "missing.json")]) == 3
    (tmp_path / "broken.json").write_text("{")
    assert main(["generate", "--config", str(tmp_path / "broken.json")]) == 2
    fresh = write_config(tmp_path / "fresh.json", tiny_config(tmp_path / "empty"))
    assert main(["train-ae", "--config", fresh]) == 4
    assert main(["reconstruct", "--config", fresh, "--image", "x.pgm", "--out", str(tmp_path / "o.obj")]) == 4
    (tmp_path / "junk.pgm").write_text("not an image")
    assert main(["reconstruct", "--config", conf, "--image", str(tmp_path / "junk.pgm"),
                 "--out", str(tmp_path / "o.obj")]) == 3


def test_reconstruct_wrong_image_size(trained, tmp_path):
    from mgcn.synth import GrayImage, save_pgm

    root, conf = trained
    save_pgm(tmp_path / "small.pgm", GrayImage(16, 16, np.zeros(256)), "grayscale")
    assert main(["reconstruct", "--config", conf, "--image", str(tmp_path / "small.pgm"),
                 "--out", str(tmp_path / "o.obj")]) == 2


def test_decoder_frozen_in_stage2(trained):
    root, _ = trained
    meta, _ = load_container(root / "out/encoder2d/encoder2d.mgcn")
    from mgcn.autoencoder import load_autoencoder
    from mgcn.encoder2d import params_digest

    ae = load_autoencoder(root / "out/autoencoder/autoencoder.mgcn")
    assert meta["decoder_digest"] == params_digest(ae.params)
