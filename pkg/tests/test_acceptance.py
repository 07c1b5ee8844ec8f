"""Release gate: the eight acceptance criteria.

Every test records a one-line verdict before asserting, and the lines are
printed together at the end of the pytest run.  ``python tests/test_acceptance.py``
runs just this file.
"""

import csv
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from oracles import random_instance, retrieval_oracle
from threadpoolctl import threadpool_limits

from gaitfusion.checkpoint import checkpoint_load, checkpoint_save
from gaitfusion.cli import main as cli_main
from gaitfusion.data import GaitDataset, SynthSpec, flow_mask_preprocess, size_align, synth_generate
from gaitfusion.data.synth import render_flow, sequence_placements, identity_params
from gaitfusion.fusion import C2Module
from gaitfusion.gradsuite import run_suite
from gaitfusion.model import ModelConfig, build
from gaitfusion.retrieval import Protocol, distance_matrix, evaluate, extract_embeddings, retrieval_metrics
from gaitfusion.tensor import Tensor
from gaitfusion.training import TrainConfig, train

RESULTS = {}


def verdict(n, ok, detail):
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


def summary_lines():
    return [RESULTS[n] for n in sorted(RESULTS)]


def single_thread():
    return threadpool_limits(limits=1)


# -- 1: mask algebra --------------------------------------------------------------------

def test_c1_mask_algebra():
    t0 = time.perf_counter()
    r = np.random.default_rng(0)
    worst_sum = worst_swap = 0.0
    extremes_ok = complement_ok = range_ok = True
    for case in range(1000):
        B, C, H, W = int(r.integers(1, 3)), int(r.integers(1, 9)), int(r.integers(1, 7)), int(r.integers(1, 6))
        if H * W == 1:
            W = 2
        f_ap = Tensor(r.standard_normal((B, C, H, W)))
        f_mo = Tensor(r.standard_normal((B, C, H, W)))
        mod = C2Module(C, reduction=int(r.integers(1, 5)), rng=np.random.default_rng(case))
        m = mod.masks(f_ap, f_mo)
        worst_sum = max(worst_sum, float(np.abs(m.m_ap.data + m.m_mo.data - 1).max()))
        range_ok &= bool((m.m_co.data >= 0).all() and (m.m_co.data <= 1).all())
        complement_ok &= bool((m.m_co.data + m.m_di.data == 1).all())
        low = np.minimum(m.m_ap.data, m.m_mo.data)
        spread = low.max(axis=(2, 3)) - low.min(axis=(2, 3))
        live = spread > mod.epsilon
        extremes_ok &= bool((m.m_co.data.min(axis=(2, 3))[live] == 0).all()
                            and (m.m_co.data.max(axis=(2, 3))[live] == 1).all())
        # swapping the branches (with their SE gates) swaps the outputs
        swapped = C2Module(C, rng=np.random.default_rng(0))
        swapped.e_ap, swapped.e_mo = mod.e_mo, mod.e_ap
        ap, mo, co = mod(f_ap, f_mo)
        ap2, mo2, co2 = swapped(f_mo, f_ap)
        worst_swap = max(worst_swap, float(max(np.abs(ap.data - mo2.data).max(), np.abs(mo.data - ap2.data).max(),
                                               np.abs(co.data - co2.data).max())))
    elapsed = time.perf_counter() - t0
    ok = (worst_sum <= 1e-6 and range_ok and complement_ok and extremes_ok and worst_swap <= 1e-6
          and elapsed < 10)
    verdict(1, ok, f"1000 cases, |m_ap+m_mo-1| {worst_sum:.1e}, swap {worst_swap:.1e}, "
                   f"m_co range {range_ok}, m_co+m_di==1 {complement_ok}, slice extremes {extremes_ok}, "
                   f"{elapsed:.1f}s")
    assert ok, RESULTS[1]


# -- 2: gradient suite ------------------------------------------------------------------

def test_c2_gradient_suite():
    t0 = time.perf_counter()
    results = run_suite()
    elapsed = time.perf_counter() - t0
    failed = [name for name, rep in results if not rep.passed]
    worst = max(rep.max_rel_error for _, rep in results)
    ok = not failed and elapsed < 120
    verdict(2, ok, f"{len(results) - len(failed)}/{len(results)} checks pass, worst rel error {worst:.1e}, "
                   f"{elapsed:.1f}s" + (f", failing: {failed}" if failed else ""))
    assert ok, RESULTS[2]


# -- 3: metric oracles ------------------------------------------------------------------

def test_c3_metric_oracles():
    worst, skips_ok, invariant = 0.0, True, True
    for seed in range(100):
        dists, pl, gl, excl = random_instance(seed, 20, 50)
        got = retrieval_metrics(dists, pl, gl, excl)
        want = retrieval_oracle(dists.tolist(), pl.tolist(), gl.tolist(), excl.tolist())
        skips_ok &= got["skipped"] == want["skipped"]
        worst = max(worst, *(abs(got[k] - want[k]) for k in ("rank1", "rank5", "map", "minp")))
        for f in (np.exp, lambda d: 2 * d ** 3 + 5):
            invariant &= retrieval_metrics(f(dists), pl, gl, excl) == got
    ok = worst <= 1e-12 and skips_ok and invariant
    verdict(3, ok, f"100 random 20x50 matrices (ties, exclusions), max deviation {worst:.1e}, "
                   f"skip tallies agree {skips_ok}, monotone invariance {invariant}")
    assert ok, RESULTS[3]


# -- 4: overfit -------------------------------------------------------------------------

@pytest.mark.slow
def test_c4_overfit(toy_dataset):
    t0 = time.perf_counter()
    with single_thread():
        model = build(ModelConfig(variant="++", num_classes=4), seed=0)
        cfg = TrainConfig(batch=(4, 2, 2), base_lr=0.1, milestones=(300,), total_steps=500, seed=0)
        result = train(model, toy_dataset, cfg)
        table = extract_embeddings(model, toy_dataset)
    d = distance_matrix(table, table)
    rank1 = retrieval_metrics(d, table.identities, table.identities, np.eye(len(table), dtype=bool))["rank1"]
    softmax = float(result.losses()[-10:, 1].mean())
    elapsed = time.perf_counter() - t0
    c = model.config
    ok = rank1 == 1.0 and softmax < 0.1 and elapsed < 900
    verdict(4, ok, f"++ widths {'/'.join(map(str, c.widths))} P={c.parts} D={c.embed_dim}, 500 steps: "
                   f"train rank-1 {rank1:.3f}, softmax (last 10 steps) {softmax:.4f}, {elapsed:.0f}s")
    assert ok, RESULTS[4]


# -- 5: fusion direction ----------------------------------------------------------------

DIRECTION_SEEDS = (0, 1, 2)
DIRECTION_STEPS = 150
DIRECTION_WIDTHS = (8, 16, 32, 32)
TRAIN_SEQS = ("00", "01", "02", "03")
HELD_OUT = Protocol(gallery_conditions=("NM",), probe_conditions=("NM",), gallery_sequences=("04", "05"),
                    probe_sequences=("06", "07"))


def held_out_rank1(variant, full, seed):
    cfg = ModelConfig(variant=variant, stem=DIRECTION_WIDTHS[0], widths=DIRECTION_WIDTHS, embed_dim=32,
                      num_classes=16)
    train_set = full.subset(lambda s: s.sequence in TRAIN_SEQS).select_modalities(cfg.modalities)
    test_set = full.subset(lambda s: s.sequence not in TRAIN_SEQS).select_modalities(cfg.modalities)
    model = build(cfg, seed)
    steps = DIRECTION_STEPS
    train(model, train_set, TrainConfig(batch=(8, 2, 4), total_steps=steps, milestones=(int(0.7 * steps),),
                                        seed=seed))
    return evaluate(HELD_OUT, extract_embeddings(model, test_set)).row("overall")["rank1"]


@pytest.mark.slow
def test_c5_fusion_direction(tmp_path):
    t0 = time.perf_counter()
    spec = SynthSpec(num_ids=16, seqs_per_id=8, frames=12, mode="mixed", conditions=("NM",))
    synth_generate(spec, tmp_path, seed=0)
    full = GaitDataset.from_dir(tmp_path)
    scores = {}
    with single_thread():
        for variant in ("s", "f", "s+f", "++"):
            scores[variant] = float(np.mean([held_out_rank1(variant, full, s) for s in DIRECTION_SEEDS]))
    ok = scores["++"] >= scores["s"] and scores["++"] >= scores["f"] and scores["s+f"] >= scores["s"]
    shown = ", ".join(f"{v} {scores[v]:.3f}" for v in scores)
    verdict(5, ok, f"held-out rank-1 over seeds {DIRECTION_SEEDS}: {shown} ({time.perf_counter() - t0:.0f}s)")
    assert ok, RESULTS[5]


# -- 6: C2 toggle ablation --------------------------------------------------------------

TOGGLES = {"a": (False, False), "b": (False, True), "c": (True, False), "d": (True, True)}
SMALL = dict(stem=4, widths=(4, 4, 8, 8), embed_dim=8, num_classes=4)


def test_c6_toggle_ablation(toy_dataset):
    trained = {}
    with single_thread():
        for key, (co, di) in TOGGLES.items():
            model = build(ModelConfig(variant="++", use_m_co=co, use_m_di=di, **SMALL), seed=0)
            log = train(model, toy_dataset, TrainConfig(batch=(2, 2, 2), total_steps=200, seed=0)).losses()
            trained[key] = bool(np.isfinite(log).all() and len(log) == 200)

    r = np.random.default_rng(5)
    batch = {"sil": r.random((2, 3, 1, 64, 44)), "par": r.random((2, 3, 1, 64, 44)),
             "flow": r.random((2, 3, 3, 64, 44))}
    naive = build(ModelConfig(variant="++", use_m_co=False, use_m_di=False, **SMALL), seed=1)
    explicit = build(ModelConfig(variant="s+p+f", **SMALL), seed=1)
    explicit.load_state_dict(naive.state_dict())
    same = all(np.array_equal(a.data, b.data) for a, b in zip(naive.eval()(batch), explicit.eval()(batch)))

    full = build(ModelConfig(variant="++", **SMALL), seed=1).eval()
    differ = {}
    for key in ("b", "c"):
        co, di = TOGGLES[key]
        part = build(ModelConfig(variant="++", use_m_co=co, use_m_di=di, **SMALL), seed=1).eval()
        part.load_state_dict(full.state_dict())
        differ[key] = not np.allclose(part(batch)[0].data, full(batch)[0].data)
    ok = all(trained.values()) and same and all(differ.values())
    verdict(6, ok, f"200 steps each {trained}, (a) == s+p+f bitwise {same}, (b)/(c) differ from (d) {differ}")
    assert ok, RESULTS[6]


# -- 7: determinism and persistence -----------------------------------------------------

def test_c7_determinism(toy_dataset, tmp_path):
    def run():
        with single_thread():
            model = build(ModelConfig(variant="++", **SMALL), seed=0)
            return train(model, toy_dataset, TrainConfig(batch=(2, 2, 3), total_steps=50, seed=0))

    first, second = run(), run()
    drift = float(np.abs(first.losses() - second.losses()).max())
    checkpoint_save(first.model, tmp_path / "a.gfck", 50, first.rng.bit_generator.state)
    model, step, state = checkpoint_load(tmp_path / "a.gfck")
    checkpoint_save(model, tmp_path / "b.gfck", step, state)
    identical = (tmp_path / "a.gfck").read_bytes() == (tmp_path / "b.gfck").read_bytes()
    proc = subprocess.run([sys.executable, "-m", "gaitfusion", "gradcheck"], capture_output=True, text=True)
    ok = drift <= 1e-6 and identical and proc.returncode == 0
    verdict(7, ok, f"50-step trace drift {drift:.1e}, checkpoint round trip byte-identical {identical}, "
                   f"gradcheck exit {proc.returncode}")
    assert ok, RESULTS[7]


# -- 8: preprocessing contracts ---------------------------------------------------------

ABLATE_INI = """
[data]
num_ids = 3
seqs_per_id = 4
frames = 4

[model]
stem = 2
widths = 2, 2, 4, 4
parts = 4
embed_dim = 4

[train]
batch = 2, 2, 2
total_steps = 2

[eval]
gallery_conditions = NM
probe_conditions = NM, BG
"""


def test_c8_preprocessing_contracts(tmp_path):
    r = np.random.default_rng(0)
    aligned_ok = True
    for _ in range(300):
        h, w = int(r.integers(2, 240)), int(r.integers(1, 180))
        sil = np.zeros((h + int(r.integers(0, 40)), w + int(r.integers(0, 80))), np.uint8)
        top, left = int(r.integers(0, sil.shape[0] - h + 1)), int(r.integers(0, sil.shape[1] - w + 1))
        blob = r.random((h, w)) < r.uniform(0.3, 1.0)
        blob[0], blob[-1] = True, True
        sil[top:top + h, left:left + w] = blob
        out = size_align(np.stack([sil, sil * 2]), sil)
        aligned_ok &= out.shape == (2, 64, 44) and bool(out[0, 0].any() and out[0, 63].any())

    masking_ok = True
    spec = SynthSpec(num_ids=3, seqs_per_id=2, frames=5).validate()
    walkers, places = identity_params(spec, r), sequence_placements(spec, r)
    for _ in range(100):
        sil = (r.random((int(r.integers(1, 90)), int(r.integers(1, 90)))) < r.random()).astype(np.uint8)
        flow = r.integers(1, 256, (3,) + sil.shape).astype(np.uint8)
        out = flow_mask_preprocess(flow, sil[None])
        masking_ok &= bool((out[:, sil == 0] == 0).all() and (out[:, sil == 1] == flow[:, sil == 1]).all())
    real = render_flow(walkers[0], places[0], 2.0, (64, 44)).transpose(2, 0, 1)
    masking_ok &= bool((flow_mask_preprocess(real, np.zeros((64, 44))) == 0).all())

    cfg = tmp_path / "tiny.ini"
    cfg.write_text(ABLATE_INI)
    code = cli_main(["synth", "--spec", str(cfg), "--out", str(tmp_path / "data")])
    code = code or cli_main(["ablate", "--config", str(cfg), "--data", str(tmp_path / "data"),
                             "--out", str(tmp_path / "ablate")])
    csv_path = Path(tmp_path / "ablate" / "ablation.csv")
    cells = len(list(csv.reader(csv_path.open()))) - 1 if csv_path.exists() else 0
    ok = aligned_ok and masking_ok and code == 0 and cells == 7
    verdict(8, ok, f"size_align 300 random masks -> 64x44 touching rows 0/63 {aligned_ok}, "
                   f"flow masking exact {masking_ok}, ablate exit {code} with {cells} cells")
    assert ok, RESULTS[8]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
