"""Acceptance criteria G1 to G10.

Each test records one PASS/FAIL line through the ``criterion`` fixture; the
lines are printed together at the end of the pytest run.
"""

import json
import statistics
import time

import numpy as np
import pytest

from itmkit import hdrio as IO
from itmkit import metrics as M
from itmkit import pipeline as P
from itmkit.cli import main
from itmkit.config import RunConfig
from itmkit.errors import FormatError
from itmkit.gradcheck import run_all
from itmkit.hisn import HisnConfig, build_network, hisn_forward
from itmkit.lamn import compute_mask, init_lamn_params, lamn_forward
from itmkit.scenes import synthetic_scene, toy_samples
from itmkit.training import TrainConfig, evaluate_loss, predict, train

G7_ITERS = 500
G7_SEEDS = (0, 1, 2)


# --- G1 -------------------------------------------------------------------------------

def test_g1_gradients_match_finite_differences(criterion):
    t0 = time.perf_counter()
    results = run_all(size=32, width=16, seed=0, coords=2)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.rel_error)
    failed = [r.name for r in results if not r.passed]
    criterion("G1", not failed and elapsed < 120,
              f"{len(results)} checks, worst {worst.name} {worst.rel_error:.2e}, {elapsed:.1f}s, failed {failed}")


# --- G2 / G6: toy training run -----------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_run():
    samples = toy_samples(4, 64)
    net_cfg = HisnConfig.toy()
    cfg = TrainConfig.toy()
    params = build_network(net_cfg)
    marks = {}

    def progress(row):
        if row["iteration"] == 10:
            marks["loss10"] = evaluate_loss(params, samples, cfg)

    t0 = time.perf_counter()
    res = train(samples, net_cfg, cfg, params=params, progress=progress)
    marks["seconds"] = time.perf_counter() - t0
    marks["final"] = evaluate_loss(res.params, samples, cfg)
    preds = [predict(res.params, s.ldr) for s in samples]
    return samples, cfg, preds, marks


@pytest.mark.slow
def test_g2_toy_training_converges(toy_run, criterion):
    samples, cfg, preds, marks = toy_run
    scores = [M.psnr(M.pu_encode(h, s.dim + s.bright), M.pu_encode(s.dim + s.bright, s.dim + s.bright))
              for s, (h, _, _, _) in zip(samples, preds)]
    ratio = marks["final"] / marks["loss10"]
    ok = ratio < 0.01 and min(scores) >= 35.0 and marks["seconds"] < 600
    criterion("G2", ok,
              f"{cfg.max_iters} iters, loss@10 {marks['loss10']:.4f}, final {marks['final']:.5f} "
              f"({100 * ratio:.2f}% of loss@10), PU-PSNR {[round(float(s), 2) for s in scores]} dB, "
              f"{marks['seconds']:.0f}s")


@pytest.mark.slow
def test_g6_bright_branch_concentrates_in_mask(toy_run, criterion):
    _, _, preds, _ = toy_run
    ratios = []
    for _, _, h2, mask in preds:
        inside = h2[mask > 0].mean()
        outside = h2[mask <= 0].mean()
        ratios.append(inside / outside if outside > 0 else np.inf)
    criterion("G6", all(r > 10 for r in ratios), f"inside/outside mean H2 {[f'{r:.3g}' for r in ratios]}")


# --- G3 -------------------------------------------------------------------------------------

def test_g3_pipeline_analytics(criterion):
    rng = np.random.default_rng(0)
    v = rng.uniform(size=100_000)
    q = P.quantize8(v)
    idempotent = np.array_equal(P.quantize8(q), q)
    bound = float(np.abs(q - v).max())
    h = rng.lognormal(0, 2, size=(64, 64, 3))
    c = P.clip_dynamic_range(h)
    identity = np.array_equal(c + (h - c), h) and np.all(c <= 1)
    ts = P.sample_exposures(60, -3, 3)
    ends = (ts[0], ts[-1]) == (0.125, 8.0)
    criterion("G3", idempotent and bound <= 1 / 510 and identity and ends,
              f"idempotent {idempotent}, max quant err {bound:.6f} (<= {1 / 510:.6f}), "
              f"decomposition {identity}, exposures [{ts[0]}, {ts[-1]}]")


# --- G4 -------------------------------------------------------------------------------------

def test_g4_mask_values(criterion):
    from itmkit.training import apply_mask_variant

    vals = [compute_mask(np.full((1, 1, 3), v), 0.95)[0, 0] for v in (0.95, 0.975, 1.0)]
    values_ok = np.allclose(vals, [0.0, 0.5, 1.0], atol=1e-6)
    img = np.stack([np.full((1, 3, 2, 2), v) for v in (0.9, 0.999, 1.0)])[:, 0]
    base = compute_mask(img)
    c = apply_mask_variant(base, "configC", img)[:, 0, 0, 0]
    d = apply_mask_variant(base, "configD", img)
    e = apply_mask_variant(base, "configE", img)
    variants_ok = np.array_equal(c, [0, 0, 1]) and np.all(d == 0) and np.all(e == 1)
    criterion("G4", values_ok and variants_ok, f"M(0.95, 0.975, 1) = {np.round(vals, 6).tolist()}, "
              f"configC {c.tolist()}, configD all 0, configE all 1")


# --- G5 -------------------------------------------------------------------------------------

def test_g5_modulation_neutral_element(criterion):
    params = build_network(HisnConfig(width=8, m=2, n=3, input_size=16))
    rng = np.random.default_rng(3)
    ldr = rng.uniform(size=(1, 3, 16, 16)).astype(np.float32)
    ldr[..., :4, :4] = 1.0
    mask = compute_mask(ldr).astype(np.float32)
    plain = hisn_forward(ldr, mask, params, modulation=False).h.data
    zeroed = hisn_forward(ldr, mask, params, zero_modulation=True).h.data
    exact = plain.tobytes() == zeroed.tobytes()
    lamn = init_lamn_params(8, 3, rng, dtype=np.float64)
    mods = lamn_forward(np.zeros((1, 1, 16, 16)), lamn, 3)
    zero = all(np.all(g.data == 0) and np.all(b.data == 0) for g, b in mods)
    criterion("G5", exact and zero, f"bitwise equal forward {exact}, zero mask gives gamma=beta=0 {zero}")


# --- G7 -------------------------------------------------------------------------------------

@pytest.mark.slow
def test_g7_config_b_not_better_than_default(criterion):
    samples = toy_samples(4, 64)
    finals = {"default": [], "configB": []}
    for variant in finals:
        for seed in G7_SEEDS:
            cfg = TrainConfig.toy(max_iters=G7_ITERS, seed=seed)
            res = train(samples, HisnConfig.toy(variant=variant, seed=seed), cfg)
            finals[variant].append(evaluate_loss(res.params, samples, cfg))
    med_b = statistics.median(finals["configB"])
    med_d = statistics.median(finals["default"])
    criterion("G7", med_b >= med_d,
              f"median final loss over seeds {list(G7_SEEDS)} at {G7_ITERS} iters: "
              f"configB {med_b:.5f} vs default {med_d:.5f}")


# --- G8 -------------------------------------------------------------------------------------

def test_g8_metric_sanity(criterion):
    rng = np.random.default_rng(0)
    yy, xx = np.mgrid[0:128, 0:128] / 128
    x = np.clip(0.5 + 0.3 * np.sin(9 * xx) * np.cos(7 * yy), 0, 1)[..., None].repeat(3, axis=2)
    p_same = M.psnr(x, x)
    s_same = M.ssim(x, x)
    p_off = M.psnr(np.zeros((16, 16)), np.full((16, 16), 0.1))
    noise = rng.standard_normal(x.shape)
    ms = [M.ms_ssim(x, x + s * noise) for s in (0.01, 0.05, 0.1)]
    ok = p_same == 99.0 and abs(s_same - 1) <= 1e-6 and abs(p_off - 20) < 1e-9 and ms[0] > ms[1] > ms[2]
    criterion("G8", ok, f"psnr(x,x) {p_same}, ssim(x,x) {s_same:.8f}, offset psnr {p_off:.6f}, "
              f"ms-ssim {[round(v, 4) for v in ms]}")


# --- G9 -------------------------------------------------------------------------------------

def test_g9_codecs(tmp_path, criterion):
    rng = np.random.default_rng(0)
    img = (rng.lognormal(0, 3, size=(33, 47, 3))).astype(np.float32)
    IO.write_pfm(tmp_path / "a.pfm", img)
    pfm_exact = IO.read_pfm(tmp_path / "a.pfm").tobytes() == img.tobytes()
    IO.write_hdr(tmp_path / "a.hdr", img)
    back = IO.read_hdr(tmp_path / "a.hdr").astype(np.float64)
    # the shared exponent fixes one quantisation step per pixel, set by its largest channel
    rel = float((np.abs(back - img) / img.max(axis=2, keepdims=True)).max())
    own = float((np.abs(back - img) / img).max())
    good = (tmp_path / "a.hdr").read_bytes()
    bad_inputs = {
        "signature": b"XX" + good[2:],
        "resolution": good.replace(b"-Y 33", b"-Q 33"),
        "truncated": good[: len(good) // 2],
        "pfm magic": b"PX" + (tmp_path / "a.pfm").read_bytes()[2:],
        "pfm payload": (tmp_path / "a.pfm").read_bytes()[:100],
    }
    diagnosed = []
    for label, blob in bad_inputs.items():
        decode = IO.decode_pfm if label.startswith("pfm") else IO.decode_hdr
        try:
            decode(blob)
        except FormatError as exc:
            if exc.offset is not None and str(exc):
                diagnosed.append(label)
    ok = pfm_exact and rel <= 1 / 256 and len(diagnosed) == len(bad_inputs)
    criterion("G9", ok, f"PFM bit-exact {pfm_exact}, RGBE max rel err {rel:.5f} (<= {1 / 256:.5f}; "
              f"vs own channel {own:.3g}), "
              f"malformed rejected with offsets {len(diagnosed)}/{len(bad_inputs)}")


# --- G10 ------------------------------------------------------------------------------------

def test_g10_reproducible_runs(tmp_path, criterion):
    src = tmp_path / "hdr"
    src.mkdir()
    for i in range(2):
        IO.write_pfm(src / f"s{i}.pfm", synthetic_scene(16, seed=i))
    cfg = RunConfig.toy().to_dict()
    cfg["network"].update(width=4, m=1, n=1, input_size=16)
    cfg["train"].update(max_iters=5, crop_size=16)
    cfg["pipeline"].update(noise=True, jpeg=True)
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    for run in ("a", "b"):
        assert main(["synth", "--hdr-dir", str(src), "--out", str(tmp_path / run / "data"),
                     "--config", str(tmp_path / "cfg.json"), "--seed", "11"]) == 0
        assert main(["train", "--data", str(tmp_path / run / "data"), "--out", str(tmp_path / run / "train"),
                     "--config", str(tmp_path / "cfg.json"), "--seed", "11"]) == 0
    same = {}
    for rel in ("data/manifest.json", "train/loss.csv", "train/checkpoint.bin"):
        same[rel] = (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    criterion("G10", all(same.values()), f"byte-identical across two runs: {same}")
