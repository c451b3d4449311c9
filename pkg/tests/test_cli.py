"""End-to-end CLI runs on toy fixtures: outputs, manifests, exit codes,
determinism."""

import json

import numpy as np
import pytest

from morphbench.autodiff import Tensor
from morphbench.cli import main
from morphbench.formats import load_image, save_image
from morphbench.models import make_toy_models


def rng(seed=0):
    return np.random.default_rng(seed)


MORPH_FLAGS = ["--latent-shape", "2x8", "--image-side", "32", "--iterations", "4"]


@pytest.fixture
def pair_fixture(tmp_path):
    """Two toy subjects rendered to PNG plus a pair list."""
    models = make_toy_models(7, image_side=32, latent=(2, 8), embed_dim=64)
    r = rng(40)
    for name, latent in (("a", r.normal(0, 1, (2, 8))), ("b", r.normal(0, 1, (2, 8)))):
        save_image(tmp_path / f"{name}.png", models.generator(Tensor(latent)).data)
    pairs = tmp_path / "pairs.csv"
    pairs.write_text("morph_id,subject1_image,subject2_image\npair01,a.png,b.png\n")
    return tmp_path, pairs


def run_morph(pairs, out, extra=()):
    return main(
        ["morph", "--pairs", str(pairs), "--models", "toy:7", "--out", str(out), *MORPH_FLAGS, *extra]
    )


# ---------------------------------------------------------------------------
# morph subcommand


def test_morph_produces_outputs_and_manifest(pair_fixture, tmp_path):
    base, pairs = pair_fixture
    out = tmp_path / "run1"
    assert run_morph(pairs, out) == 0
    assert (out / "pair01.png").is_file()
    assert (out / "pair01_trace.csv").is_file()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "morph"
    assert manifest["config"]["iterations"] == 4
    assert manifest["config"]["latent_shape"] == "2x8"
    trace = (out / "pair01_trace.csv").read_text().splitlines()
    assert trace[0].startswith("iteration,lr,loss_total")
    assert len(trace) == 5


def test_morph_rerun_is_bit_identical(pair_fixture, tmp_path):
    base, pairs = pair_fixture
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert run_morph(pairs, out1) == 0
    assert run_morph(pairs, out2) == 0
    for name in ("pair01.png", "pair01_trace.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_morph_jobs_flag_keeps_outputs_identical(pair_fixture, tmp_path):
    base, pairs = pair_fixture
    pairs.write_text(
        "morph_id,subject1_image,subject2_image\n"
        "pair01,a.png,b.png\npair02,b.png,a.png\n"
    )
    out1, out2 = tmp_path / "serial", tmp_path / "parallel"
    assert run_morph(pairs, out1) == 0
    assert run_morph(pairs, out2, extra=["--jobs", "2"]) == 0
    for name in ("pair01.png", "pair02_trace.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_morph_missing_pair_file_exits_2_without_outputs(tmp_path):
    out = tmp_path / "nope"
    code = run_morph(tmp_path / "missing.csv", out)
    assert code == 2
    assert not out.exists()


def test_morph_missing_subject_image_exits_2(pair_fixture, tmp_path):
    base, pairs = pair_fixture
    pairs.write_text("morph_id,subject1_image,subject2_image\npair01,a.png,ghost.png\n")
    out = tmp_path / "run"
    assert run_morph(pairs, out) == 2
    assert not out.exists()


def test_morph_wrong_size_image_is_per_pair_failure_exit_4(pair_fixture, tmp_path):
    base, pairs = pair_fixture
    save_image(base / "tiny.png", rng(41).uniform(0, 1, (3, 16, 16)))
    pairs.write_text(
        "morph_id,subject1_image,subject2_image\n"
        "bad,tiny.png,b.png\npair01,a.png,b.png\n"
    )
    out = tmp_path / "run"
    assert run_morph(pairs, out) == 4
    # the healthy pair still completed
    assert (out / "pair01.png").is_file()
    failures = (out / "failures.csv").read_text()
    assert "bad," in failures


def test_morph_bad_lambda_exits_2(pair_fixture, tmp_path):
    base, pairs = pair_fixture
    assert run_morph(pairs, tmp_path / "x", extra=["--lambda2", "-1"]) == 2


def test_morph_bad_model_spec_exits_2(pair_fixture, tmp_path):
    base, pairs = pair_fixture
    code = main(
        ["morph", "--pairs", str(pairs), "--models", "toy:notanint", "--out", str(tmp_path / "x"), *MORPH_FLAGS]
    )
    assert code == 2


def test_morph_zeroed_identity_lambda_zeroes_trace_column(pair_fixture, tmp_path):
    base, pairs = pair_fixture
    out = tmp_path / "ablate"
    assert run_morph(pairs, out, extra=["--lambda2", "0"]) == 0
    rows = (out / "pair01_trace.csv").read_text().splitlines()[1:]
    identity_col = [float(r.split(",")[4]) for r in rows]
    assert identity_col == [0.0] * len(rows)


def test_unknown_flag_exits_2(pair_fixture, tmp_path):
    base, pairs = pair_fixture
    code = main(
        ["morph", "--pairs", str(pairs), "--models", "toy:7", "--out", str(tmp_path / "x"), "--bogus", "1"]
    )
    assert code == 2


# ---------------------------------------------------------------------------
# vuln subcommand


def write_all_pass_scores(path, n_morphs=5):
    lines = ["kind,morph_id,subject_index,attempt_index,score,group_gender,group_medium"]
    for i in range(n_morphs):
        for k in (1, 2):
            lines.append(f"mated_morph,m{i},{k},1,10.0,male,digital")
    for _ in range(20):
        lines.append("genuine,,,,12.0,,")
    for v in np.linspace(0, 1, 1000):
        lines.append(f"impostor,,,,{float(v)!r},,")
    path.write_text("\n".join(lines) + "\n")


def test_vuln_all_pass_fixture(tmp_path):
    scores = tmp_path / "scores.csv"
    write_all_pass_scores(scores)
    out = tmp_path / "vuln"
    assert main(["vuln", "--scores", str(scores), "--fmr", "0.001", "--out", str(out)]) == 0
    report = json.loads((out / "vuln_report.json").read_text())
    assert report["fnmr"] == 0.0
    for group in report["groups"]:
        assert group["mmpmr"] == 1.0
        assert group["fmmpmr"] == 1.0
        # fnmr is 0, so the rmmr columns equal the rate columns
        assert group["rmmr_mmpmr"] == group["mmpmr"]
        assert group["rmmr_fmmpmr"] == group["fmmpmr"]
    csv_text = (out / "vuln_report.csv").read_text()
    assert csv_text.splitlines()[0] == "group,n_morphs,mmpmr,fmmpmr,rmmr_mmpmr,rmmr_fmmpmr"


def test_vuln_missing_file_exits_2(tmp_path):
    assert main(["vuln", "--scores", str(tmp_path / "no.csv"), "--out", str(tmp_path / "o")]) == 2


def test_vuln_bad_fmr_exits_2(tmp_path):
    scores = tmp_path / "scores.csv"
    write_all_pass_scores(scores)
    assert main(["vuln", "--scores", str(scores), "--fmr", "2.0", "--out", str(tmp_path / "o")]) == 2


def test_vuln_malformed_scores_exit_3(tmp_path):
    scores = tmp_path / "scores.csv"
    scores.write_text("totally,wrong,header\n1,2,3\n")
    assert main(["vuln", "--scores", str(scores), "--out", str(tmp_path / "o")]) == 3


# ---------------------------------------------------------------------------
# quality subcommand


def test_quality_identical_images_inf_sentinel(tmp_path):
    img = rng(42).uniform(0, 1, (3, 32, 32))
    for name in ("m.png", "p.png"):
        save_image(tmp_path / name, img)
    morph_dir = tmp_path / "morphs"
    morph_dir.mkdir()
    save_image(morph_dir / "m.png", img)
    pairs = tmp_path / "pairs.csv"
    pairs.write_text("morph_id,subject1_image,subject2_image\nm,p.png,p.png\n")
    out = tmp_path / "q"
    code = main(["quality", "--morph-dir", str(morph_dir), "--pairs", str(pairs), "--out", str(out)])
    assert code == 0
    lines = (out / "quality.csv").read_text().splitlines()
    assert lines[1].split(",")[1] == "INF"
    assert float(lines[1].split(",")[2]) == pytest.approx(1.0, abs=1e-9)
    summary = json.loads((out / "quality_summary.json").read_text())
    assert summary["psnr_inf_excluded"] == 1


def test_quality_two_record_ci_closed_form(tmp_path):
    r = rng(43)
    base = r.uniform(0.3, 0.7, (3, 32, 32))
    morph_dir = tmp_path / "morphs"
    morph_dir.mkdir()
    pairs_lines = ["morph_id,subject1_image,subject2_image"]
    for i, amp in enumerate((0.02, 0.05)):
        noisy = np.clip(base + amp * r.normal(0, 1, base.shape), 0, 1)
        save_image(tmp_path / f"p{i}.png", base)
        save_image(morph_dir / f"m{i}.png", noisy)
        pairs_lines.append(f"m{i},p{i}.png,p{i}.png")
    pairs = tmp_path / "pairs.csv"
    pairs.write_text("\n".join(pairs_lines) + "\n")
    out = tmp_path / "q"
    assert main(["quality", "--morph-dir", str(morph_dir), "--pairs", str(pairs), "--out", str(out)]) == 0
    summary = json.loads((out / "quality_summary.json").read_text())
    csv_rows = (out / "quality.csv").read_text().splitlines()[1:]
    psnr_values = [float(row.split(",")[1]) for row in csv_rows]
    mean = float(np.mean(psnr_values))
    sd = float(np.std(psnr_values, ddof=1))
    assert summary["psnr"]["mean"] == pytest.approx(mean, abs=1e-12)
    assert summary["psnr"]["halfwidth"] == pytest.approx(1.96 * sd / np.sqrt(2), abs=1e-12)


def test_quality_psnr_monotone_in_noise_ladder(tmp_path):
    r = rng(44)
    base = r.uniform(0.3, 0.7, (3, 32, 32))
    morph_dir = tmp_path / "morphs"
    morph_dir.mkdir()
    pairs_lines = ["morph_id,subject1_image,subject2_image"]
    for i, amp in enumerate((0.02, 0.05, 0.1, 0.2)):
        noisy = np.clip(base + amp * r.normal(0, 1, base.shape), 0, 1)
        save_image(tmp_path / f"p{i}.png", base)
        save_image(morph_dir / f"m{i}.png", noisy)
        pairs_lines.append(f"m{i},p{i}.png,p{i}.png")
    pairs = tmp_path / "pairs.csv"
    pairs.write_text("\n".join(pairs_lines) + "\n")
    out = tmp_path / "q"
    assert main(["quality", "--morph-dir", str(morph_dir), "--pairs", str(pairs), "--out", str(out)]) == 0
    rows = (out / "quality.csv").read_text().splitlines()[1:]
    psnr_values = [float(row.split(",")[1]) for row in rows]
    assert all(b < a for a, b in zip(psnr_values, psnr_values[1:]))


def test_quality_unreadable_image_error_row_exit_partial(tmp_path):
    img = rng(45).uniform(0, 1, (3, 32, 32))
    morph_dir = tmp_path / "morphs"
    morph_dir.mkdir()
    save_image(morph_dir / "ok.png", img)
    save_image(tmp_path / "p.png", img)
    (morph_dir / "broken.png").write_bytes(b"not a png")
    pairs = tmp_path / "pairs.csv"
    pairs.write_text(
        "morph_id,subject1_image,subject2_image\nok,p.png,p.png\nbroken,p.png,p.png\n"
    )
    out = tmp_path / "q"
    code = main(["quality", "--morph-dir", str(morph_dir), "--pairs", str(pairs), "--out", str(out)])
    assert code == 1
    text = (out / "quality.csv").read_text()
    assert "broken,ERROR,ERROR" in text
    assert "ok," in text


# ---------------------------------------------------------------------------
# mad subcommand


def test_mad_separable_fixture_zero_grid(tmp_path):
    lines = ["class,score,generation_method,medium,split"]
    for v in np.linspace(0.8, 1.0, 40):
        lines.append(f"attack,{float(v)!r},latent_mix,digital,test")
    for v in np.linspace(0.0, 0.2, 40):
        lines.append(f"bonafide,{float(v)!r},latent_mix,digital,test")
    lines.append("attack,0.9,latent_mix,digital,train")
    scores = tmp_path / "mad.csv"
    scores.write_text("\n".join(lines) + "\n")
    out = tmp_path / "d"
    assert main(["mad", "--scores", str(scores), "--out", str(out)]) == 0
    report = json.loads((out / "mad_report.json").read_text())
    cell = report["cells"][0]
    assert cell["train_method"] == "latent_mix"
    assert (cell["d_eer"], cell["bpcer_at_apcer5"], cell["bpcer_at_apcer10"]) == (0.0, 0.0, 0.0)


def test_mad_missing_file_exits_2(tmp_path):
    assert main(["mad", "--scores", str(tmp_path / "no.csv"), "--out", str(tmp_path / "o")]) == 2


def test_mad_bad_data_exits_3(tmp_path):
    scores = tmp_path / "mad.csv"
    scores.write_text("class,score,generation_method,medium,split\nattack,1.0,a,digital,test\n")
    assert main(["mad", "--scores", str(scores), "--out", str(tmp_path / "o")]) == 3


# ---------------------------------------------------------------------------
# baseline detector feeds the mad pipeline end to end


def test_baseline_detector_to_mad_pipeline(tmp_path):
    from morphbench.mad import baseline_detector_score

    r = rng(46)
    lines = ["class,score,generation_method,medium,split"]
    for i in range(12):
        clean = r.uniform(0.2, 0.8) * np.ones((3, 32, 32))
        noisy = np.clip(clean + r.normal(0, 0.15, clean.shape), 0, 1)
        lines.append(f"bonafide,{baseline_detector_score(clean)!r},toy,digital,test")
        lines.append(f"attack,{baseline_detector_score(noisy)!r},toy,digital,test")
    scores = tmp_path / "mad.csv"
    scores.write_text("\n".join(lines) + "\n")
    out = tmp_path / "d"
    assert main(["mad", "--scores", str(scores), "--out", str(out)]) == 0
    report = json.loads((out / "mad_report.json").read_text())
    assert report["cells"][0]["d_eer"] == 0.0  # noise-vs-flat is trivially separable
