"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced; they are also repeated in the terminal summary.
"""
import json
import math
import shutil
import time

import numpy as np
import pytest

from acceptance_log import report
from cleanroom import audit, cli, compression, data, model, privacy, protocol
from cleanroom.compression import Codec
from cleanroom.data import GeneratorConfig, generate
from cleanroom.metrics import calibration_ratio, roc_auc
from cleanroom.model import AdaptedModel, BaseModel
from cleanroom.protocol import SessionConfig
from cleanroom.training import ALL_PARAMS, OptimizerConfig, local_train, pretrain, split_train
from oracles import bf16_reference, fd_adapter_grad
from separation import CLEANROOM_UID, FEATURE_UID, can_switch_users, denied_for, run_separated

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)


def rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


# -- shared experiment data -------------------------------------------------------------


class World:
    """Pretrained base plus advertiser train/holdout data for one seed."""

    def __init__(self, seed, n_adv=20_000):
        self.base = pretrain(generate(GeneratorConfig(seed=seed, n=100_000)), (64, 32), seed=seed, epochs=3)
        adv = dict(seed=seed, domain="adv1", domain_shift=0.5)
        self.train = generate(GeneratorConfig(n=n_adv, **adv))
        self.hold = generate(GeneratorConfig(n=20_000, stream=1, **adv))

    def auc(self, m, adapter=None):
        return roc_auc(m.forward(self.hold.X, adapter), self.hold.labels)


@pytest.fixture(scope="module")
def worlds():
    return {s: World(s) for s in SEEDS}


def split_adapter(world, codec=Codec("none"), epochs=20, seed=0):
    m = AdaptedModel(world.base)
    m.add_adapter("adv", layers=[0, 1], rank=1, seed=seed + 1)
    cfg = SessionConfig(256, m.param_count("adv"), codec, seed=seed, model_signature=m.signature("adv"))
    transport, thread = protocol.start_loopback_cleanroom(world.train.label_store(), cfg)
    rep = split_train(m, "adv", world.train.features_only(), cfg, OptimizerConfig("adam", lr=3e-3), transport,
                      epochs=epochs, batch_seed=seed)
    thread.join(5)
    return m, rep


# -- 1 ------------------------------------------------------------------------------------


def random_config(rng):
    while True:
        d = int(rng.integers(4, 65))
        hidden = tuple(int(h) for h in rng.integers(4, 65, size=int(rng.integers(1, 3))))
        m = AdaptedModel(BaseModel.init(d, hidden, int(rng.integers(1 << 30))).freeze())
        n_layers = len(hidden) + 1
        layers = sorted(rng.choice(n_layers, size=int(rng.integers(1, n_layers + 1)), replace=False).tolist())
        ad = m.add_adapter("a", layers, int(rng.integers(1, 9)), seed=int(rng.integers(1 << 30)))
        if 16 <= m.param_count("a") <= 2048:
            for f in ad.factors.values():
                f.B[...] = rng.normal(0, 0.2, f.B.shape)
            return m, d


def test_criterion_1_protocol_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_agg = worst_traj = 0.0
    sizes = []
    for k in range(100):
        m, d = random_config(rng)
        b = int(rng.integers(8, 257))
        f = m.param_count("a")
        sizes.append((b, f))
        n = 20 * b
        ds = data.Dataset(rng.choice(1 << 40, n, replace=False).astype(np.uint64),
                          rng.standard_normal((n, d)).astype(np.float32), (rng.random(n) < 0.3).astype(np.int8))
        cfg = SessionConfig(b, f, seed=k, model_signature=m.signature("a"))
        # one batch: wire aggregate against the local sum
        transport, thread = protocol.start_loopback_cleanroom(ds.label_store(), cfg)
        client = protocol.FeaturePartyClient(transport, cfg)
        client.hello()
        batch = next(data.batches(ds, b, seed=k))
        agg = protocol.featureparty_step(client, m, "a", batch, 0).gradient
        client.end()
        thread.join(5)
        p = privacy.sigmoid(m.forward(batch.X, "a"))
        local = m.per_sample_grads(batch.X, "a").G.T @ (p - batch.labels)
        worst_agg = max(worst_agg, rel(agg, local))
        # 20 optimiser steps: split trajectory against the local trainer
        m_split, m_local = m.copy(), m.copy()
        opt = OptimizerConfig("sgd", lr=0.05 / b)
        transport, thread = protocol.start_loopback_cleanroom(ds.label_store(), cfg)
        r1 = split_train(m_split, "a", ds.features_only(), cfg, opt, transport, batch_seed=k, max_steps=20,
                         record_trajectory=True)
        thread.join(5)
        r2 = local_train(m_local, "a", ds, opt, batch_size=b, batch_seed=k, max_steps=20, record_trajectory=True)
        assert len(r1.trajectory) == len(r2.trajectory) == 20
        worst_traj = max(worst_traj, max(rel(x, y) for x, y in zip(r1.trajectory, r2.trajectory)))
    elapsed = time.perf_counter() - t0
    bs, fs = zip(*sizes)
    ok = worst_agg <= 1e-5 and worst_traj <= 1e-5 and elapsed < 120
    report(1, ok, f"100 configs b={min(bs)}..{max(bs)} |f|={min(fs)}..{max(fs)}: max rel agg err {worst_agg:.2e}, "
                  f"max rel trajectory err {worst_traj:.2e}, {elapsed:.1f}s")
    assert ok


# -- 2 ------------------------------------------------------------------------------------


def test_criterion_2_per_sample_gradients_vs_finite_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst, probes = 0.0, 0
    while probes < 1000:
        m, d = random_config(rng)
        X = rng.standard_normal((16, d))
        G = m.per_sample_grads(X, "a").G
        for _ in range(50):
            i, j = int(rng.integers(16)), int(rng.integers(G.shape[1]))
            fd = fd_adapter_grad(m, "a", X[i:i + 1], j)[0]
            scale = max(abs(fd), abs(G[i, j]))
            err = abs(G[i, j] - fd) / scale if scale > 1e-6 else abs(G[i, j] - fd) / 1e-6
            worst = max(worst, err)
            probes += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 60
    report(2, ok, f"{probes} probes: max rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok


# -- 3 ------------------------------------------------------------------------------------


def test_criterion_3_lora_identity():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((10_000, 32))
    m = AdaptedModel(BaseModel.init(32, (64, 32), 0).freeze())
    ad = m.add_adapter("fresh", rank=4, seed=1)
    base_z = m.forward(X)
    fresh_equal = np.array_equal(m.forward(X, "fresh"), base_z)
    for f in ad.factors.values():
        f.B[...] = rng.normal(size=f.B.shape)
    changed = not np.array_equal(m.forward(X, "fresh"), base_z)
    m.set_all_gates("fresh", 0)
    gated_equal = np.array_equal(m.forward(X, "fresh"), base_z)
    ok = fresh_equal and gated_equal and changed
    report(3, ok, f"10k inputs: B=0 exact {fresh_equal}, gate off exact {gated_equal}")
    assert ok


# -- 4 ------------------------------------------------------------------------------------


def test_criterion_4_label_dp_flip_rates():
    y = np.random.default_rng(0).integers(0, 2, 100_000)
    details, ok = [], True
    for eps, q_expected in ((3.0, 0.952574), (5.0, 0.993307)):
        q = privacy.keep_prob(eps)
        rate = privacy.flip_labels(y, q, seed=int(eps)).flip_mask.mean()
        good = abs(q - q_expected) < 5e-7 and abs(rate - (1 - q)) <= 0.005
        ok &= good
        details.append(f"eps={eps:g} q={q:.6f} flip rate {rate:.5f} (target {1 - q:.5f})")
    report(4, ok, "; ".join(details))
    assert ok


# -- 5 ------------------------------------------------------------------------------------


def test_criterion_5_debias_direction(worlds):
    t0 = time.perf_counter()
    eps = 3.0
    q = privacy.keep_prob(eps)
    rows = []
    for seed in SEEDS:
        w = worlds[seed]
        adv = dict(seed=seed, domain="adv1", domain_shift=0.5, base_rate=0.05)
        train = generate(GeneratorConfig(n=50_000, **adv))
        order = np.argsort(train.sample_ids)
        flipped = privacy.flip_labels(train.labels[order], q, seed).labels
        noisy = np.empty_like(flipped)
        noisy[order] = flipped
        out = {}
        for name, labels, mode in (
            ("clean", train.labels, privacy.LossMode.plain("mean")),
            ("plain", noisy, privacy.LossMode.plain("mean")),
            ("debias", noisy, privacy.LossMode.debias(q, "mean")),
        ):
            m = AdaptedModel(w.base.unfrozen_copy())
            local_train(m, ALL_PARAMS, train, OptimizerConfig("adam", lr=3e-4), mode, batch_size=1024,
                        epochs=10, batch_seed=seed, labels=labels)
            p = privacy.sigmoid(m.forward(w.hold.X))
            out[name] = (roc_auc(p, w.hold.labels), calibration_ratio(p, w.hold.labels))
        rows.append(out)
    mean = {k: np.mean([r[k] for r in rows], axis=0) for k in rows[0]}
    drop_plain = mean["clean"][0] - mean["plain"][0]
    drop_debias = mean["clean"][0] - mean["debias"][0]
    elapsed = time.perf_counter() - t0
    ok = (mean["plain"][1] >= 1.5 and 0.95 <= mean["debias"][1] <= 1.05 and drop_plain > drop_debias
          and elapsed < 600)
    report(5, ok, f"eps=3, mean of {len(SEEDS)} seeds: calibration no-debias {mean['plain'][1]:.3f}, "
                  f"debias {mean['debias'][1]:.3f}; AUC drop no-debias {drop_plain:.4f} > debias {drop_debias:.4f}; "
                  f"{elapsed:.0f}s")
    assert ok


# -- 6 ------------------------------------------------------------------------------------


def test_criterion_6_compression(worlds):
    # uplink gradient payload on a real split-training run
    w = worlds[0]
    m_none, r_none = split_adapter(w, Codec("none"))
    m_q, r_q = split_adapter(w, Codec("qsgd", 8))
    payload = sum(t["grad_payload"] for t in r_q.per_batch) / sum(t["grad_payload"] for t in r_none.per_batch)
    total = r_q.bytes_up / r_none.bytes_up
    auc_none, auc_q = w.auc(m_none, "adv"), w.auc(m_q, "adv")

    rng = np.random.default_rng(11)
    v = rng.standard_normal(64)
    reps = 100_000
    dec = compression.decode(compression.encode(np.tile(v, (reps, 1)), Codec("qsgd", 8), rng)).G
    z = np.abs(dec.mean(axis=0) - v) / (dec.std(axis=0, ddof=1) / math.sqrt(reps))
    # 64 coordinates each checked at 3 sigma; a couple of tail hits are expected
    unbiased = int((z > 3).sum()) <= 2

    x = rng.standard_normal(1_000_000).astype(np.float32)
    r = compression.bf16_round(x).astype(np.float64)
    bf_err = float(np.max(np.abs(r - x) / np.abs(x.astype(np.float64))))
    sample = rng.choice(x.size, 2000, replace=False)
    bf_ref = all(compression.bf16_round(x[i:i + 1])[0] == bf16_reference(float(x[i])) for i in sample)

    ok = payload <= 0.27 and unbiased and bf_err <= 2 ** -8 and bf_ref and abs(auc_q - auc_none) <= 0.02
    report(6, ok, f"qsgd8/none gradient payload {payload:.4f} (whole uplink {total:.4f}); "
                  f"MC coords beyond 3 sigma {(z > 3).sum()}/64; bf16 max rel err {bf_err:.3e}; "
                  f"AUC none {auc_none:.4f} qsgd8 {auc_q:.4f}")
    assert ok


# -- 7 ------------------------------------------------------------------------------------


def test_criterion_7_leakage_regimes():
    t0 = time.perf_counter()
    q3 = privacy.keep_prob(3.0)
    det = audit.leakage_sweep([28, 56], d=16, hidden=(32, 16), trials=20)
    under = audit.leakage_sweep([256], d=16, hidden=(16, 8), layers=[0], trials=50)
    dp = audit.leakage_sweep([28, 56], d=16, hidden=(32, 16), epsilons=[3.0], trials=20)
    elapsed = time.perf_counter() - t0
    det_ok = all(r.param_count >= 2 * r.batch_size and r.recovery_accuracy >= 0.99 for r in det)
    u = under[0]
    under_ok = u.batch_size >= 8 * u.param_count and u.recovery_accuracy <= u.majority_rate + 0.10
    dp_ok = all(r.recovery_accuracy <= q3 + 0.02 for r in dp)
    ok = det_ok and under_ok and dp_ok and elapsed < 300
    report(7, ok, "determined " + ", ".join(f"b={r.batch_size}/|f|={r.param_count}: {r.recovery_accuracy:.3f}" for r in det)
           + f"; underdetermined b={u.batch_size}/|f|={u.param_count}: {u.recovery_accuracy:.3f} "
             f"(majority {u.majority_rate:.3f}); eps=3 "
           + ", ".join(f"b={r.batch_size}: {r.recovery_accuracy:.3f}" for r in dp)
           + f" (cap {q3 + 0.02:.3f}); {elapsed:.0f}s")
    assert ok


# -- 8 ------------------------------------------------------------------------------------


def test_criterion_8_adapter_efficiency(worlds):
    t0 = time.perf_counter()
    ratios, details = [], []
    for seed in SEEDS:
        w = worlds[seed]
        frozen = w.auc(AdaptedModel(w.base))
        full = AdaptedModel(w.base.unfrozen_copy())
        local_train(full, ALL_PARAMS, w.train, OptimizerConfig("adam", lr=1e-3), privacy.LossMode.plain("mean"),
                    batch_size=256, epochs=10, batch_seed=seed)
        m, _ = split_adapter(w, seed=seed)
        share = m.param_count("adv") / w.base.num_params()
        gain_full, gain_adapter = w.auc(full) - frozen, w.auc(m, "adv") - frozen
        ratios.append(gain_adapter / gain_full)
        details.append(f"seed {seed}: {gain_adapter:.4f}/{gain_full:.4f}")
    elapsed = time.perf_counter() - t0
    mean = float(np.mean(ratios))
    ok = share <= 0.05 and mean >= 0.7 and elapsed < 900
    report(8, ok, f"adapter {m.param_count('adv')} of {w.base.num_params()} params ({share:.1%}); gain ratio "
                  f"{mean:.3f} ({'; '.join(details)}); {elapsed:.0f}s")
    assert ok


# -- 9 ------------------------------------------------------------------------------------


def random_message(rng):
    kind = int(rng.integers(6))
    if kind == 0:
        cfg = SessionConfig(int(rng.integers(1, 1 << 20)), int(rng.integers(1, 1 << 20)),
                            [Codec("none"), Codec("qsgd", int(rng.integers(2, 9))), Codec("bf16"), Codec("raw64")][int(rng.integers(4))],
                            privacy.PrivacyBudget("label_dp", float(rng.uniform(0.1, 10))) if rng.random() < 0.5
                            else privacy.PrivacyBudget(),
                            bool(rng.integers(2)), ["sum", "mean"][int(rng.integers(2))], bool(rng.integers(2)),
                            int(rng.integers(1 << 62)), rng.bytes(32))
        return protocol.Hello(cfg)
    if kind == 1:
        return protocol.HelloAck(bool(rng.integers(2)), "reason %d" % rng.integers(1000))
    if kind == 2:
        b, f = int(rng.integers(1, 33)), int(rng.integers(1, 65))
        codec = [Codec("none"), Codec("qsgd", int(rng.integers(2, 9))), Codec("bf16"), Codec("raw64")][int(rng.integers(4))]
        wide = codec.kind == "raw64"
        z = rng.normal(0, 4, b)
        return protocol.ForwardBatch(int(rng.integers(1 << 62)),
                                     rng.integers(0, 2**64 - 1, size=b, dtype=np.uint64, endpoint=True),
                                     z if wide else z.astype(np.float32).astype(np.float64),
                                     compression.encode(rng.normal(size=(b, f)), codec, rng), wide)
    if kind == 3:
        wide = bool(rng.integers(2))
        g = rng.normal(size=int(rng.integers(0, 100)))
        return protocol.AggGrad(int(rng.integers(1 << 62)), g if wide else g.astype(np.float32).astype(np.float64),
                                float(rng.normal()) if rng.random() < 0.5 else None, wide)
    if kind == 4:
        return protocol.EndSession()
    return protocol.Error(int(rng.integers(256)), "error %d" % rng.integers(1 << 30))


def test_criterion_9_wire_conformance():
    rng = np.random.default_rng(99)
    lossless = 0
    for _ in range(10_000):
        msg = random_message(rng)
        frame = protocol.encode_message(msg)
        back = protocol.decode_message(frame)
        lossless += back == msg and protocol.encode_message(back) == frame

    ds = generate(GeneratorConfig(seed=5, n=4000, d=8, teacher_hidden=(16, 8), base_rate=0.1))
    fingerprints = []
    for kind in ("loopback", "tcp"):
        m = AdaptedModel(BaseModel.init(8, (16, 8), 0).freeze())
        m.add_adapter("a", rank=2, seed=1)
        cfg = SessionConfig(64, m.param_count("a"), Codec("qsgd", 8), privacy.PrivacyBudget("label_dp", 3.0),
                            report_loss=True, seed=17, model_signature=m.signature("a"))
        if kind == "loopback":
            transport, thread = protocol.start_loopback_cleanroom(ds.label_store(), cfg)
        else:
            server = protocol.TcpCleanRoomServer(protocol.CleanRoom(ds.label_store(), cfg))
            thread = server.start(1)
            transport = protocol.TcpTransport.connect(*server.address)
        rep = split_train(m, "a", ds.features_only(), cfg, OptimizerConfig("adam", lr=1e-2), transport, epochs=2)
        thread.join(5)
        fingerprints.append(rep.fingerprint())
    same = fingerprints[0] == fingerprints[1]
    ok = lossless == 10_000 and same
    report(9, ok, f"{lossless}/10000 messages roundtrip losslessly; TCP and loopback TrainReports identical: {same} "
                  f"({fingerprints[0]['steps']} steps, wall time excluded)")
    assert ok


# -- 10 -----------------------------------------------------------------------------------


def test_criterion_10_separation(tmp_path):
    if not can_switch_users():
        report(10, False, "not run: needs root to start the two parties under separate uids")
        pytest.skip("needs root")
    ds = generate(GeneratorConfig(seed=2, n=3000, d=8, teacher_hidden=(16, 8), base_rate=0.1))
    stem = tmp_path / "data"
    data.save(ds, stem)
    model.save_model(BaseModel.init(8, (16, 8), 0).freeze(), tmp_path / "model.cvrm")
    overrides = ["session.batch_size=64", "session.dp.mode=label_dp", "session.dp.epsilon=3",
                 "optimizer.kind=adam", "optimizer.lr=0.01", "epochs=2"]
    server, client, fp_out, cr_out, root = run_separated(
        stem.with_suffix(".cvrd"), stem.with_suffix(".labels.csv"), tmp_path / "model.cvrm", overrides)
    loop_out = tmp_path / "loop"
    assert cli.run(["split-train", "--model", str(tmp_path / "model.cvrm"), "--features", str(stem.with_suffix(".cvrd")),
                    "--labels", str(stem.with_suffix(".labels.csv")), *sum((["--set", o] for o in overrides), []),
                    "--out", str(loop_out)]) == 0
    same = (client.returncode == 0 and json.loads((fp_out / "train_report.json").read_text())["checksum"]
            == json.loads((loop_out / "train_report.json").read_text())["checksum"])
    locked = (denied_for(root / "cleanroom" / "labels.csv", FEATURE_UID)
              and denied_for(root / "featureparty" / "data.cvrd", CLEANROOM_UID))
    ok = client.returncode == 0 and server.returncode == 0 and locked and same
    report(10, ok, f"clean room uid {CLEANROOM_UID} and feature party uid {FEATURE_UID} with 0600 files: "
                   f"exit codes {server.returncode}/{client.returncode}, cross access denied {locked}, "
                   f"checksum equals loopback {same}")
    shutil.rmtree(root)
    assert ok, (client.err, server.err)
