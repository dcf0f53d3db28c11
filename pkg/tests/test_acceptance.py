"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line shown in the terminal summary. Run alone
with ``pytest tests/test_acceptance.py -v``. Criteria 7 to 9 need CIFAR-10
binaries under ``data/cifar-10-batches-bin`` (or ``$DCNET_CIFAR_DIR``) and
share one smoke training run of about half an hour.
"""

import math
import os
import time

import numpy as np
import pytest

from dcnet import njet
from dcnet.analysis import MaskSpec, contrast_sweep, pattern_completion
from dcnet.checkpoint import Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from dcnet.cli import main
from dcnet.data import load_cifar10, parse_cifar_bytes
from dcnet.engine import Tensor, default_dtype
from dcnet.model import ModelSpec, OdeBlock, block_sigmas, build_model, count_params
from dcnet.ode import SolverConfig, VectorField, dopri5_integrate
from dcnet.srf import init_srf_params
from dcnet.train import (
    CHECKPOINT_NAME,
    METRICS_HEADER,
    METRICS_NAME,
    TrainConfig,
    evaluate,
    model_from_checkpoint,
    read_csv,
    train,
    write_csv,
)
import adjoint_util
import fd_util
from cifar_fixture import record, write_tree

CIFAR_DIR = os.environ.get("DCNET_CIFAR_DIR", os.path.join(os.path.dirname(__file__), "..", "data", "cifar-10-batches-bin"))
SMOKE = TrainConfig(
    epochs=200,
    epoch_multiplier=1,
    batch=32,
    lr=0.1,
    widths=(16, 32, 64),
    train_limit=128,
    augment=False,
    eval_train=True,
    eval_limit=0,
    target_train_accuracy=0.95,
    seed=0,
)
SIGMA_LOG2_BOUND = 6.0


def _timed(budget):
    start = time.perf_counter()
    return lambda: f"({time.perf_counter() - start:.1f} s, budget {budget} s)"


@pytest.fixture(scope="session")
def cifar():
    if not os.path.exists(os.path.join(CIFAR_DIR, "test_batch.bin")):
        pytest.skip(f"CIFAR-10 binaries not found in {CIFAR_DIR}")
    return load_cifar10(CIFAR_DIR)


@pytest.fixture(scope="session")
def smoke_run(cifar, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("smoke"))
    start = time.perf_counter()
    rows = train(SMOKE, cifar, out, log=lambda s: None)
    return out, rows, time.perf_counter() - start


@pytest.fixture(scope="session")
def smoke_model(smoke_run):
    return model_from_checkpoint(os.path.join(smoke_run[0], CHECKPOINT_NAME))


def test_criterion_01_basis_identities(criterion):
    elapsed = _timed(10)
    xs = njet.grid(9)
    separable = all(
        np.array_equal(
            njet.gaussian_kernel_2d(l, k, 1.7, 9).values,
            np.outer(njet.gaussian_deriv_1d(k, 1.7, xs), njet.gaussian_deriv_1d(l, 1.7, xs)),
        )
        for l, k in njet.basis_orders(2)
    )
    odd = max(abs(njet.gaussian_kernel_2d(l, k, 1.3, 9).values.sum()) for l in range(4) for k in range(4) if (l % 2 or k % 2))
    steer = max(
        float(np.abs(njet.steered_kernel(th, 1.2, 11) - njet.directional_second_derivative(th, 1.2, 11)).max())
        for th in (0.0, math.pi / 6, math.pi / 4, math.pi / 2)
    )
    semi = max(njet.semigroup_residual(l, k, t, tp, 41) for l, k in njet.basis_orders(2) for t in (1, 2, 4) for tp in (1, 2, 4))
    taylor_tol = {(0, 0): (1.0, 0.09), (1, 0): (1.0, 1e-2), (0, 1): (1.0, 1e-2), (2, 0): (2.0, 5e-2), (1, 1): (1.0, 5e-2), (0, 2): (2.0, 5e-2)}
    taylor = all(abs(abs(njet.njet_taylor_check(p, 1.0)) - e) < tol for p, (e, tol) in taylor_tol.items())
    ok = separable and odd < 1e-12 and steer < 1e-10 and semi < 1e-3 and taylor
    detail = f"separable={separable} odd-sum {odd:.1e} steering {steer:.1e} semigroup {semi:.1e} taylor={taylor} {elapsed()}"
    assert criterion(1, ok, detail), detail


def test_criterion_02_sigma_gradient(criterion):
    elapsed = _timed(5)
    worst = 0.0
    for sigma in (0.8, 1.5, 3.0):
        for seed in range(10):
            alphas = np.random.default_rng(seed).normal(size=6)
            size = njet.support_size(sigma)
            ana = njet.dfilter_dsigma(njet.NJetFilter(2, sigma, alphas), size).values
            eps = 1e-4
            hi = njet.assemble_filter(njet.NJetFilter(2, sigma + eps, alphas), size).values
            lo = njet.assemble_filter(njet.NJetFilter(2, sigma - eps, alphas), size).values
            fd = (hi - lo) / (2 * eps)
            worst = max(worst, float(np.linalg.norm(ana - fd) / np.linalg.norm(fd)))
    detail = f"worst relative error {worst:.1e} over 30 draws {elapsed()}"
    assert criterion(2, worst < 1e-4, detail), detail


def test_criterion_03_solver(criterion):
    elapsed = _timed(5)

    def run(tol):
        with default_dtype(np.float64):
            return dopri5_integrate(VectorField(lambda h, t: -h), Tensor(np.ones(1)), 0.0, 1.0, SolverConfig(tol, tol))

    tight, loose = run(1e-6), run(1e-3)
    err = abs(float(tight.final_state.data[0]) - math.exp(-1))
    gain = abs(float(loose.final_state.data[0]) - math.exp(-1)) / err
    per_step = set(np.diff(tight.step_nfe).tolist())
    ok = err < 1e-5 and gain >= 100 and per_step == {6} and tight.rejected_steps == 0
    detail = f"error {err:.1e}, tolerance gain {gain:.0f}x, NFE per step after the first {sorted(per_step)} {elapsed()}"
    assert criterion(3, ok, detail), detail


@pytest.mark.slow
def test_criterion_04_adjoint_fidelity(criterion):
    elapsed = _timed(120)
    worst, where = 0.0, None
    for seed in range(10):
        for name, err in adjoint_util.adjoint_errors(seed).items():
            if err > worst:
                worst, where = err, (seed, name)
    detail = f"worst relative error {worst:.1e} (seed {where[0]}, {where[1]}) {elapsed()}"
    assert criterion(4, worst < 1e-2, detail), detail


def test_criterion_05_autodiff(criterion):
    elapsed = _timed(60)
    errs = {name: max(fd_util.op_error(name, seed) for seed in range(3)) for name in fd_util.OPS}
    name = max(errs, key=errs.get)
    detail = f"{len(errs)} ops, worst {name} {errs[name]:.1e} {elapsed()}"
    assert criterion(5, errs[name] < 1e-3, detail), detail


def test_criterion_06_parameter_economy(criterion):
    elapsed = _timed(1)
    srf = init_srf_params(1, 1, "shared_sigma")
    coeffs = srf["alphas"].data.size
    pixel = OdeBlock(1, "pixel").conv1.weight.data.size
    widths = (16, 32, 64)
    pairs = [("dcn_ode", "ode_net"), ("resnet_srf_blocks", "resnet_blocks")]
    counts = {v: count_params(build_model(ModelSpec(v, widths))) for pair in pairs for v in pair}
    fewer = all(counts[a] < counts[b] for a, b in pairs)
    ok = coeffs == 6 and pixel == 9 and fewer
    detail = f"coefficients {coeffs} vs {pixel}; counts {counts} {elapsed()}"
    assert criterion(6, ok, detail), detail


@pytest.mark.slow
def test_criterion_07_training_smoke(criterion, smoke_run, smoke_model):
    _, rows, seconds = smoke_run
    train_rows = [r for r in rows if r["split"] == "train"]
    evals = [r for r in rows if r["split"] == "train_eval"]
    best = max(float(r["accuracy"]) for r in evals)
    finite = all(math.isfinite(float(r["loss"])) for r in rows)
    sig = np.concatenate(block_sigmas(smoke_model))
    logged = [float(r[f"sigma_block{i}"]) for r in train_rows for i in (1, 2, 3)]
    bounded = np.all(np.abs(np.log2(np.concatenate([sig, logged]))) <= SIGMA_LOG2_BOUND)
    ok = best >= 0.95 and len(train_rows) <= 200 and finite and bool(bounded)
    detail = (
        f"train accuracy {best:.3f} after {len(train_rows)} epochs, losses finite={finite}, "
        f"sigma range [{sig.min():.2f}, {sig.max():.2f}] ({seconds:.0f} s, budget 1800 s)"
    )
    assert criterion(7, ok, detail), detail


@pytest.mark.slow
def test_criterion_08_pattern_completion(criterion, cifar, smoke_model):
    elapsed = _timed(600)
    test = cifar[1].take(np.arange(100))
    rep = pattern_completion(smoke_model, test, MaskSpec(6), samples=9)
    zero = pattern_completion(smoke_model, test.take(np.arange(10)), MaskSpec(0), samples=9)
    reduced = rep.mean[-1] < rep.mean[0]
    ok = bool(reduced) and not np.any(zero.per_image)
    detail = f"D(0) {rep.mean[0]:.2f} -> D(T) {rep.mean[-1]:.2f} over {rep.count} images, D at n=0 all zero={not np.any(zero.per_image)} {elapsed()}"
    assert criterion(8, ok, detail), detail


@pytest.mark.slow
def test_criterion_09_contrast_nfe(criterion, cifar, smoke_model):
    elapsed = _timed(600)
    test = cifar[1].take(np.arange(256))
    rows = contrast_sweep(smoke_model, test, [1.0, 0.1], "scaled_inputs_all_blocks")
    nfe = [float(r["nfe_block1"]) for r in rows]
    plain = evaluate(smoke_model, test)
    naive = contrast_sweep(smoke_model, test, [1.0], "naive")[0]
    identical = float(naive["accuracy"]) == plain.accuracy and float(naive["nfe_block1"]) == plain.nfe[0]
    ok = nfe[1] < nfe[0] and identical
    detail = f"block-1 NFE {nfe[0]:.2f} at c=1.0, {nfe[1]:.2f} at c=0.1; naive c=1 identical to eval={identical} {elapsed()}"
    assert criterion(9, ok, detail), detail


def test_criterion_10_determinism_and_formats(criterion, tmp_path):
    elapsed = _timed(60)
    # checkpoint round trip
    model = build_model(ModelSpec(widths=(8, 16, 32)), seed=5)
    params = {k: p.data for k, p in model.named_parameters().items()}
    save_checkpoint(str(tmp_path / "m.dcn"), Checkpoint(model.spec.to_text(), params, meta={"epoch": 1}))
    back = load_checkpoint(str(tmp_path / "m.dcn"))
    ckpt_ok = all(back.params[k].tobytes() == v.tobytes() for k, v in params.items()) and to_bytes(back) == to_bytes(from_bytes(to_bytes(back)))

    # resumed run versus uninterrupted run
    data = load_cifar10(write_tree(str(tmp_path / "cifar"), per_file=2))
    cfg = TrainConfig(widths=(4, 8, 8), batch=4, epochs=3, epoch_multiplier=1, rtol=1e-2, atol=1e-2)
    quiet = lambda s: None
    train(cfg, data, str(tmp_path / "full"), log=quiet)
    train(cfg, data, str(tmp_path / "part"), stop_after=1, log=quiet)
    train(cfg, data, str(tmp_path / "part"), resume=str(tmp_path / "part" / CHECKPOINT_NAME), log=quiet)
    a = load_checkpoint(str(tmp_path / "full" / CHECKPOINT_NAME))
    b = load_checkpoint(str(tmp_path / "part" / CHECKPOINT_NAME))
    resume_ok = all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)

    # two-record fixture
    (r0, p0), (r1, p1) = record(7, 11), record(2, 12)
    pixels, labels = parse_cifar_bytes(r0 + r1)
    fixture_ok = labels.tolist() == [7, 2] and np.array_equal(pixels, np.stack([p0, p1]))

    # CSV round trips through the tool's parser
    metrics = read_csv(str(tmp_path / "full" / METRICS_NAME), METRICS_HEADER)
    write_csv(str(tmp_path / "copy.csv"), METRICS_HEADER, metrics)
    csv_ok = read_csv(str(tmp_path / "copy.csv"), METRICS_HEADER) == metrics and len(metrics) == 6
    out = str(tmp_path / "cli")
    ck = str(tmp_path / "full" / CHECKPOINT_NAME)
    for argv in (["mask-sweep", "--masks", "0,4"], ["contrast-sweep", "--c", "1,0.5"], ["completion", "--samples", "3"], ["sigmas"], ["eval"]):
        assert main(argv + ["--checkpoint", ck, "--data", str(tmp_path / "cifar"), "--out", out]) == 0
    for name in ("mask_sweep.csv", "contrast_sweep.csv", "completion.csv", "sigmas.csv", "eval.csv"):
        rows = read_csv(os.path.join(out, name))
        write_csv(str(tmp_path / "again.csv"), list(rows[0]), rows)
        csv_ok = csv_ok and read_csv(str(tmp_path / "again.csv")) == rows
    ok = ckpt_ok and resume_ok and fixture_ok and csv_ok
    detail = f"checkpoint={ckpt_ok} resume={resume_ok} fixture={fixture_ok} csv={csv_ok} {elapsed()}"
    assert criterion(10, ok, detail), detail
