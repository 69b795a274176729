"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest -s tests/test_acceptance.py` to see the per-criterion lines
as they complete.  Tolerances are pinned in the asserts.
"""
import base64
import itertools
import json
import os
import time
from collections import Counter

import numpy as np
import pytest
from click.testing import CliRunner

import cluster_util as cu
import oracles
from imce import models
from imce.cli import main as cli_main
from imce.compiler import CalibrationSet, compile_model, fuse, optimize
from imce.errors import CapacityError
from imce.ir import OpKind, save_model
from imce.kernels_an import AnMatrix, Im2colPlan, conv2d, mvm, pad16
from imce.mapper import emit_configs, map_nodes, validate_plan
from imce.noise import NoiseModel
from imce.quant import QuantParams
from imce.reference import execute_fp32
from imce.runtime.cluster import LocalCluster, configure_cluster
from imce.runtime.executor import SequentialExecutor
from imce.runtime.protocol import ComMessage, MsgType, read_message, send_message
from test_protocol import GOLDEN


def _report(num: int, passed: bool, detail: str) -> None:
    print(f"[acceptance] criterion {num:2d}: {'PASS' if passed else 'FAIL'} - {detail}")
    assert passed, f"criterion {num}: {detail}"


# ---------------------------------------------------------------------------
# 1. Kernel oracle equivalence
# ---------------------------------------------------------------------------


def test_c01_mvm_oracle_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    shapes = [(16, 16), (4096, 512), (128, 128), (512, 512)]
    while len(shapes) < 1000:
        shapes.append((16 * int(rng.integers(1, 257)), 16 * int(rng.integers(1, 33))))
    checked = 0
    for rows, cols in shapes:
        w = rng.integers(-127, 128, size=(rows, cols), dtype=np.int8)
        x = rng.integers(-127, 128, size=rows, dtype=np.int8)
        in_s = float(rng.uniform(0.001, 0.1))
        w_s = float(rng.uniform(0.001, 0.1))
        out_s = float(rng.uniform(0.01, 2.0))
        m = AnMatrix(w, QuantParams(w_s))
        got = mvm(m, x, QuantParams(in_s), QuantParams(out_s))
        acc = oracles.mvm_int(w, x)
        expect = oracles.requant_an(acc, in_s, w_s, out_s)
        assert np.array_equal(got, expect), (rows, cols)
        checked += 1
    elapsed = time.perf_counter() - t0
    _report(1, checked >= 1000 and elapsed < 120.0,
            f"{checked} MVM instances bit-exact vs INT64/FP32 oracle in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. im2col correctness
# ---------------------------------------------------------------------------


def _build_an(rng, w):
    out_c = w.shape[0]
    mat = w.reshape(out_c, -1)
    padded = np.zeros((pad16(mat.shape[0]), pad16(mat.shape[1])), dtype=np.int8)
    padded[: mat.shape[0], : mat.shape[1]] = mat
    w_s = float(rng.uniform(0.002, 0.05))
    return AnMatrix(np.ascontiguousarray(padded.T), QuantParams(w_s)), w_s


def test_c02_conv_vs_direct_oracle():
    rng = np.random.default_rng(77)
    cases = 0
    grid = list(itertools.product((1, 2, 3, 5), (1, 2), (0, 1)))
    while cases < 500:
        k, s, p = grid[cases % len(grid)]
        c_in = int(rng.integers(1, 5))
        c_out = int(rng.integers(1, 7))
        h = int(rng.integers(max(2, k), 8))
        if (h + 2 * p - k) // s + 1 < 1:
            cases += 1
            continue
        w = rng.integers(-127, 128, size=(c_out, c_in, k, k), dtype=np.int8)
        x = rng.integers(-127, 128, size=(c_in, h, h), dtype=np.int8)
        b = rng.integers(-500, 500, size=c_out, dtype=np.int32)
        m, w_s = _build_an(rng, w)
        in_s = float(rng.uniform(0.005, 0.05))
        out_s = float(rng.uniform(0.1, 2.0))
        plan = Im2colPlan.for_conv((c_in, h, h), (k, k), (s, s), (p, p))
        got = conv2d(x, m, b, plan, c_out, QuantParams(in_s), QuantParams(out_s))
        expect = oracles.conv_direct(x, w, b, (s, s), (p, p), in_s, w_s, out_s)
        assert np.array_equal(got, expect), (k, s, p)
        cases += 1

    # 1x1 convolution is exactly a per-pixel MVM
    cross_checks = 0
    for _ in range(20):
        c_in = int(rng.integers(1, 6))
        c_out = int(rng.integers(1, 9))
        h = int(rng.integers(2, 6))
        w = rng.integers(-127, 128, size=(c_out, c_in, 1, 1), dtype=np.int8)
        x = rng.integers(-127, 128, size=(c_in, h, h), dtype=np.int8)
        m, w_s = _build_an(rng, w)
        in_s, out_s = QuantParams(0.02), QuantParams(0.8)
        plan = Im2colPlan.for_conv((c_in, h, h), (1, 1), (1, 1), (0, 0))
        y = conv2d(x, m, None, plan, c_out, in_s, out_s)
        for py in range(h):
            for px in range(h):
                xv = np.zeros(m.rows, dtype=np.int8)
                xv[:c_in] = x[:, py, px]
                assert np.array_equal(y[:, py, px], mvm(m, xv, in_s, out_s)[:c_out])
        cross_checks += 1
    _report(2, cases >= 500 and cross_checks == 20,
            f"{cases} conv cases bit-exact vs direct-conv oracle; 1x1==MVM on {cross_checks} cases")


# ---------------------------------------------------------------------------
# 3. Compiler semantics
# ---------------------------------------------------------------------------


def _fusion_census_oracle(g):
    """Independent single-consumer pattern detector over plain dicts."""
    kind = {n.id: n.kind.value for n in g.nodes}
    inputs = {n.id: list(n.inputs) for n in g.nodes}
    outputs = {n.id: list(n.outputs) for n in g.nodes}
    out_names = {s.name for s in g.graph_outputs}

    def consumers(t):
        return [nid for nid in kind for x in inputs[nid] if x == t]

    def single_consumer(t):
        if t in out_names:
            return None
        c = consumers(t)
        return c[0] if len(c) == 1 else None

    changed = True
    while changed:
        changed = False
        # phase A: Mul(x, Sigmoid(x)) -> SiLU
        for sid in sorted(kind):
            if kind.get(sid) != "Sigmoid":
                continue
            x, sx = inputs[sid][0], outputs[sid][0]
            mid = single_consumer(sx)
            if mid is None or kind[mid] != "Mul" or set(inputs[mid]) != {x, sx}:
                continue
            kind[sid] = "SiLU"
            inputs[sid] = [x]
            outputs[sid] = outputs[mid]
            del kind[mid], inputs[mid], outputs[mid]
            changed = True
            break
        if changed:
            continue
        # phase B: epilogue merges
        table = {("Conv2D", "ReLU"): "FusedConvReLU", ("Conv2D", "SiLU"): "FusedConvSiLU",
                 ("Add", "ReLU"): "FusedAddReLU"}
        for hid in sorted(kind):
            tid = single_consumer(outputs[hid][0]) if outputs[hid] else None
            if tid is None:
                continue
            new = table.get((kind[hid], kind[tid]))
            if new is None:
                continue
            kind[hid] = new
            outputs[hid] = outputs[tid]
            del kind[tid], inputs[tid], outputs[tid]
            changed = True
            break
    return Counter(kind.values())


def test_c03_compiler_semantics():
    rng = np.random.default_rng(303)
    graphs = 0
    max_err = 0.0
    for seed in range(100):
        g = models.random_graph(seed=seed, max_nodes=15)
        assert len(g.nodes) <= 16
        g_opt = optimize(g)
        g_fused = fuse(g_opt)
        x = rng.normal(0, 1, size=g.graph_inputs[0].shape).astype(np.float32)
        o1 = execute_fp32(g, {g.graph_inputs[0].name: x})
        o2 = execute_fp32(g_fused, {g.graph_inputs[0].name: x})
        for name in o1:
            err = float(np.max(np.abs(o1[name].reshape(-1) - o2[name].reshape(-1)))) if o1[name].size else 0.0
            max_err = max(max_err, err)
            assert err <= 1e-5, (seed, name, err)
        # fusion fires exactly where the independent detector says it must
        got = Counter(n.kind.value for n in g_fused.nodes)
        want = _fusion_census_oracle(g_opt)
        assert got == want, (seed, got, want)
        graphs += 1
    _report(3, graphs >= 100,
            f"{graphs} random graphs: FP32 pre/post max err {max_err:.2e} (<=1e-5); "
            f"fusion census matches independent detector")


# ---------------------------------------------------------------------------
# 4. Distributed = sequential on the 14-node residual replica
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def replica_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("replica")
    g = models.resnet8(fused=True, seed=21)
    model = str(d / "model.json")
    save_model(g, model)
    rng = np.random.default_rng(22)
    cal_path = str(d / "cal.npz")
    CalibrationSet(rng.uniform(-1, 1, size=(8, 3, 16, 16)).astype(np.float32)).save(cal_path)
    cal = CalibrationSet.load(cal_path)
    return {"dir": d, "model": model, "cal_path": cal_path, "cm": compile_model(g, cal)}


def test_c04_distributed_equals_oracle(replica_files):
    cm = replica_files["cm"]
    census = Counter(n.kind for n in cm.nodes)
    assert census[OpKind.MVM] == 1 and census[OpKind.FusedAddReLU] == 3
    assert census[OpKind.Conv2D] + census[OpKind.FusedConvReLU] == 10  # 9 convs + avg-pool-as-conv
    assert cm.node("gap").kind == OpKind.Conv2D

    n_inputs, seed = 100, 11
    runner = CliRunner()
    odir = str(replica_files["dir"] / "oracle")
    res = runner.invoke(cli_main, ["--seed", str(seed), "oracle", replica_files["model"],
                                   "--calibration", replica_files["cal_path"],
                                   "--count", str(n_inputs), "-o", odir])
    assert res.exit_code == 0, res.output
    oracle_doc = json.load(open(os.path.join(odir, "results.json")))
    expected = [base64.b64decode(r["outputs"]["logits"]["data_b64"]) for r in oracle_doc["requests"]]

    rng = np.random.default_rng(seed)
    xs = list(rng.uniform(-1.0, 1.0, size=(n_inputs, 3, 16, 16)).astype(np.float32))
    hw = cu.hw_info(3, 1, fthreads=4, sthreads=64)
    runs = 0
    for strategy in ("loadbalance", "mincut", "roundrobin"):
        plan = map_nodes(cm, hw, strategy)
        cfg_dir = str(replica_files["dir"] / f"cfg_{strategy}")
        emit_configs(plan, cm, hw, NoiseModel(), cfg_dir)
        with LocalCluster(hw, str(replica_files["dir"] / f"w_{strategy}")) as pool:
            addr = pool.start(boards=sorted(set(plan.assignment.values())))
            assert len(addr) >= 4
            handle = configure_cluster(cfg_dir, hw, addr)
            for window in (1, 4, 8):
                results = list(handle.run_inference(xs, window=window))
                assert len(results) == n_inputs
                for r, want in zip(results, expected):
                    assert r.outputs["logits"].tobytes() == want, (strategy, window, r.seq)
                runs += 1
            handle.shutdown()
    _report(4, runs == 9,
            f"{n_inputs} inputs bit-identical to the CLI oracle across 3 strategies x windows (1,4,8) on 4 workers")


# ---------------------------------------------------------------------------
# 5. Pipelining gain
# ---------------------------------------------------------------------------


def test_c05_pipelining_gain(tmp_path):
    g = models.conv_chain(stages=6, size=24, channels=48)
    cm = cu.compile_for_tests(g, seed=5)
    hw = cu.hw_info(6, 0, fthreads=1)
    plan = map_nodes(cm, hw, "roundrobin")
    emit_configs(plan, cm, hw, NoiseModel(), str(tmp_path))
    rng = np.random.default_rng(55)
    xs = [rng.uniform(-1, 1, size=(3, 24, 24)).astype(np.float32) for _ in range(40)]
    out_name = cm.graph_outputs[0][0].name
    ex = SequentialExecutor(cm, NoiseModel())
    expected = [ex.run_fp32_input(x, seq=i)[out_name].tobytes() for i, x in enumerate(xs)]

    rates = {}
    with LocalCluster(hw, str(tmp_path / "workers")) as pool:
        addr = pool.start()
        handle = configure_cluster(str(tmp_path), hw, addr)
        for window in (1, 8):
            t0 = time.perf_counter()
            results = list(handle.run_inference(xs, window=window))
            dt = time.perf_counter() - t0
            rates[window] = len(results) / dt
            for r, want in zip(results, expected):
                assert r.outputs[out_name].tobytes() == want, (window, r.seq)
        handle.shutdown()
    ratio = rates[8] / rates[1]
    _report(5, ratio > 1.5,
            f"6-stage chain on 6 workers: window8 {rates[8]:.1f}/s vs window1 {rates[1]:.1f}/s "
            f"(ratio {ratio:.2f} > 1.5); outputs identical to sequential")


# ---------------------------------------------------------------------------
# 6/7. Desk-scale trained model: INT8 accuracy and noise behavior
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def digits_setup():
    torch = pytest.importorskip("torch")
    import torch.nn as nn
    from sklearn.datasets import load_digits
    from sklearn.model_selection import train_test_split

    torch.manual_seed(0)
    digits = load_digits()
    X = (digits.images / 16.0).astype(np.float32)[:, None, :, :]
    y = digits.target.astype(np.int64)
    Xtr, Xte, ytr, yte = train_test_split(X, y, test_size=0.25, random_state=0, stratify=y)
    net = nn.Sequential(
        nn.Conv2d(1, 8, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(8, 16, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Flatten(), nn.Linear(64, 10),
    )
    opt = torch.optim.Adam(net.parameters(), lr=2e-3)
    lossf = nn.CrossEntropyLoss()
    Xt, yt = torch.from_numpy(Xtr), torch.from_numpy(ytr)
    for _ in range(30):
        perm = torch.randperm(len(Xt))
        for i in range(0, len(Xt), 64):
            idx = perm[i : i + 64]
            opt.zero_grad()
            lossf(net(Xt[idx]), yt[idx]).backward()
            opt.step()
    sd = net.state_dict()
    weights = {
        "conv1.w": sd["0.weight"].numpy(), "conv1.b": sd["0.bias"].numpy(),
        "conv2.w": sd["3.weight"].numpy(), "conv2.b": sd["3.bias"].numpy(),
        "fc.w": sd["7.weight"].numpy(), "fc.b": sd["7.bias"].numpy(),
    }
    g = models.digits_cnn(weights)
    cm = compile_model(g, CalibrationSet(Xtr[:64].reshape(-1, 1, 8, 8)))
    return {"graph": g, "cm": cm, "Xte": Xte, "yte": yte}


def _int8_accuracy(cm, nm, X, y) -> float:
    ex = SequentialExecutor(cm, nm)
    hits = 0
    for i, (xi, yi) in enumerate(zip(X, y)):
        out = ex.run_fp32_input(xi[0][None], seq=i)["logits"]
        hits += int(np.argmax(out) == yi)
    return 100.0 * hits / len(y)


def test_c06_quantization_accuracy(digits_setup):
    g, cm = digits_setup["graph"], digits_setup["cm"]
    Xte, yte = digits_setup["Xte"], digits_setup["yte"]
    hits = 0
    for xi, yi in zip(Xte, yte):
        out = execute_fp32(g, {"image": xi[0][None]})["logits"]
        hits += int(np.argmax(out) == yi)
    fp32_acc = 100.0 * hits / len(yte)
    int8_acc = _int8_accuracy(cm, NoiseModel(), Xte, yte)
    gap = fp32_acc - int8_acc
    _report(6, fp32_acc >= 95.0 and gap <= 2.0,
            f"digits CNN: FP32 {fp32_acc:.2f}% (>=95), INT8 {int8_acc:.2f}%, gap {gap:.2f} pp (<=2)")


def test_c07_noise_behavior(digits_setup):
    cm = digits_setup["cm"]
    Xte, yte = digits_setup["Xte"][:300], digits_setup["yte"][:300]
    x0 = Xte[0][0][None]

    # (a) kind=None and sigma=0 are bit-identical to the noiseless build
    base = SequentialExecutor(cm, NoiseModel()).run_fp32_input(x0, seq=0)["logits"]
    for nm in (NoiseModel(kind="none", sigma_prog=0.5, seed=9),
               NoiseModel(kind="gaussian_programming", sigma_prog=0.0, seed=9),
               NoiseModel(kind="combined", sigma_prog=0.0, sigma_read=0.0, seed=9)):
        out = SequentialExecutor(cm, nm).run_fp32_input(x0, seq=0)["logits"]
        assert np.array_equal(out, base), nm

    # (b) mean accuracy non-increasing over the programming-noise sweep
    sweep = (0.0, 0.02, 0.05, 0.1)
    means = []
    for sp in sweep:
        accs = [_int8_accuracy(cm, NoiseModel(kind="gaussian_programming", sigma_prog=sp, seed=s),
                               Xte, yte) for s in range(5)]
        means.append(float(np.mean(accs)))
    slack = 1.0  # pp; sampling tolerance over 300 images x 5 seeds
    monotone = all(means[i + 1] <= means[i] + slack for i in range(len(means) - 1))
    assert means[-1] < means[0] - 5.0  # heavy noise visibly degrades

    # (c) repeated reads with sigma_read > 0 differ between invocations
    nm = NoiseModel(kind="gaussian_read", sigma_read=0.05, seed=4)
    ex = SequentialExecutor(cm, nm)
    r0 = ex.run_fp32_input(x0, seq=0)["logits"]
    r1 = ex.run_fp32_input(x0, seq=1)["logits"]
    reads_differ = not np.array_equal(r0, r1)
    _report(7, monotone and reads_differ,
            f"noise: zero-noise identity held; sweep means {[round(m, 2) for m in means]} "
            f"non-increasing (slack {slack}pp); repeated noisy reads differ")


# ---------------------------------------------------------------------------
# 8. Mapper validity
# ---------------------------------------------------------------------------


def test_c08_mapper_validity():
    rng = np.random.default_rng(808)
    valid_plans = 0
    infeasible = 0
    optimum_checks = 0
    for i in range(200):
        g = models.random_graph(seed=9000 + i, max_nodes=12)
        cm = cu.compile_for_tests(g, n_cal=2, seed=i)
        n_an = int(rng.integers(1, 5))
        n_di = int(rng.integers(1, 5))
        fth = int(rng.integers(1, 6))
        hw = cu.hw_info(n_an, n_di, fthreads=fth, sthreads=256)
        need_an = sum(1 for n in cm.nodes if n.accel == "an")
        need_di = sum(1 for n in cm.nodes if n.accel == "di")
        feasible = need_an <= n_an * fth and need_di <= n_di * fth
        strategy = ("loadbalance", "mincut", "roundrobin")[i % 3]
        if not feasible:
            with pytest.raises(CapacityError) as ei:
                map_nodes(cm, hw, strategy)
            want = ("an", need_an, n_an * fth) if need_an > n_an * fth \
                else ("di", need_di, n_di * fth)
            assert (ei.value.accel_class, ei.value.needed, ei.value.available) == want
            assert ei.value.shortfall == want[1] - want[2]
            infeasible += 1
            continue
        plan = map_nodes(cm, hw, strategy)
        validate_plan(plan, cm, hw)
        valid_plans += 1
        # small instances: mincut within 2 edges of the exhaustive optimum
        if len(cm.nodes) <= 8 and optimum_checks < 12:
            hw8 = cu.hw_info(2, 2, fthreads=8, sthreads=256)
            mc = map_nodes(cm, hw8, "mincut")
            best = _exhaustive_best_cut(cm, hw8)
            assert mc.cut_edges() <= best + 2, i
            optimum_checks += 1
    _report(8, valid_plans + infeasible == 200 and optimum_checks >= 5,
            f"{valid_plans} plans validator-clean, {infeasible} infeasible raised CapacityError "
            f"with exact shortfall; mincut within +2 of exhaustive optimum on {optimum_checks} instances")


def _exhaustive_best_cut(cm, hw):
    from imce.mapper import _cut_count, _transitions

    trans = _transitions(cm)
    choices = [[b.board_id for b in hw.by_class(n.accel)] for n in cm.nodes]
    ids = [n.id for n in cm.nodes]
    best = None
    for combo in itertools.product(*choices):
        counts = {}
        ok = True
        for bid in combo:
            counts[bid] = counts.get(bid, 0) + 1
            if counts[bid] > hw.board(bid).max_fthreads:
                ok = False
                break
        if not ok:
            continue
        cut = _cut_count(trans, dict(zip(ids, combo)))
        best = cut if best is None else min(best, cut)
    return best


# ---------------------------------------------------------------------------
# 9. Protocol conformance
# ---------------------------------------------------------------------------


def test_c09_protocol_conformance(tmp_path):
    from imce.runtime.protocol import decode

    for msg, hexstr in GOLDEN:
        assert msg.encode().hex() == hexstr
        assert decode(bytes.fromhex(hexstr)) == msg

    # fuzzed frames never crash a worker; it answers Error or drops the link
    g = models.single_mvm(seed=1)
    cm = cu.compile_for_tests(g, seed=1)
    handle, pool = cu.deploy(cm, cu.hw_info(1, 0), str(tmp_path))
    import socket as socketmod

    rng = np.random.default_rng(909)
    addr = list(pool.address_map.values())[0]
    host, port = addr.rsplit(":", 1)
    with pool:
        for i in range(150):
            s = socketmod.create_connection((host, int(port)), timeout=5)
            s.settimeout(0.3)
            if i % 3 == 0:  # valid header, garbage payload
                hdr = ComMessage.with_json(MsgType.Hello, {}).encode()[:22]
                blob = hdr + rng.bytes(15)
            else:
                blob = rng.bytes(int(rng.integers(1, 64)))
            try:
                s.sendall(blob)
                try:
                    s.recv(4096)
                except socketmod.timeout:
                    pass
            finally:
                s.close()
        results = list(handle.run_inference([np.zeros(16, dtype=np.float32)], window=1))
        alive = len(results) == 1
        handle.shutdown()
    _report(9, alive,
            f"{len(GOLDEN)} golden frames byte-exact; worker survived 150 fuzzed connections "
            f"and still served inference")


# ---------------------------------------------------------------------------
# 10. End-to-end determinism
# ---------------------------------------------------------------------------


def test_c10_pipeline_determinism(replica_files, tmp_path):
    man = {
        "model": replica_files["model"],
        "calibration": replica_files["cal_path"],
        "hw_info": None,  # filled below
        "strategy": "mincut",
        "window": 4,
        "inputs": {"synthetic": {"count": 10, "seed": 33}},
        "noise": {"kind": "gaussian_programming", "sigma_prog": 0.02, "seed": 5},
    }
    hw_path = str(tmp_path / "hw.json")
    cu.hw_info(3, 1, fthreads=4, sthreads=64).save(hw_path)
    man["hw_info"] = hw_path
    man_path = str(tmp_path / "manifest.json")
    json.dump(man, open(man_path, "w"))

    runner = CliRunner()
    digests = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        c = runner.invoke(cli_main, ["--seed", "33", "compile", replica_files["model"],
                                     replica_files["cal_path"], "-o", str(out / "compiled")])
        assert c.exit_code == 0, c.output
        m = runner.invoke(cli_main, ["--seed", "33", "map", str(out / "compiled"), hw_path,
                                     "--strategy", "mincut", "-o", str(out / "mapped")])
        assert m.exit_code == 0, m.output
        r = runner.invoke(cli_main, ["--seed", "33", "run", man_path, "-o", str(out / "run"),
                                     "--local"])
        assert r.exit_code == 0, r.output
        snapshot = {}
        for sub in ("compiled", "mapped"):
            for fn in sorted(os.listdir(out / sub)):
                snapshot[f"{sub}/{fn}"] = open(out / sub / fn, "rb").read()
        snapshot["run/results.json"] = open(out / "run" / "results.json", "rb").read()
        for fn in sorted(os.listdir(out / "run" / "compiled")):
            snapshot[f"run/compiled/{fn}"] = open(out / "run" / "compiled" / fn, "rb").read()
        for fn in sorted(os.listdir(out / "run" / "mapped")):
            snapshot[f"run/mapped/{fn}"] = open(out / "run" / "mapped" / fn, "rb").read()
        digests.append(snapshot)

    a, b = digests
    assert a.keys() == b.keys()
    diffs = [k for k in a if a[k] != b[k]]
    _report(10, not diffs,
            f"two seeded compile->map->run executions produced byte-identical artifacts "
            f"({len(a)} files compared){'; diffs: ' + str(diffs) if diffs else ''}")
