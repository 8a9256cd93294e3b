"""Acceptance gate: every criterion at its stated tolerance, one line each.

Run with `-s` to see the per-criterion PASS/FAIL lines as they happen.
Fixtures are module-scoped so the expensive artifacts (trained models,
signature corpora, stream replays) are built exactly once.
"""

import time

import numpy as np
import pytest

from vrguard.attacks import AttackConfig, craft_batch, craft_cw, evaluate_under_attack
from vrguard.classifiers import (
    ClassifierModel,
    TrainConfig,
    build,
    desk_cnn_lstm,
    desk_gru,
    desk_lstm,
    evaluate,
)
from vrguard.classifiers import train as train_classifier
from vrguard.data import (
    SensorTrace,
    SynthConfig,
    apply_normalize,
    fit_normalize_many,
    synth_generate,
    window,
    windows_to_arrays,
)
from vrguard.detector import DetectorSpec, evaluate_detector, train_detector
from vrguard.explain import (
    BackgroundSet,
    make_background,
    shap_input_exact,
    shap_input_sampled,
    signature_matrix,
)
from vrguard.numerics import (
    SeededRng,
    Tensor,
    cross_entropy,
    finite_diff_check,
    matmul,
    relu,
    reshape,
    softmax,
)
from vrguard.pipeline import InjectionSchedule, run_stream, write_event_log

pytestmark = pytest.mark.slow

TIMESTEP = 30
N_FEATURES = 6
EPSILON = 0.1


def _criterion(number, description, ok, detail=""):
    line = f"[criterion {number:>2}] {'PASS' if ok else 'FAIL'} - {description}"
    if detail:
        line += f" | {detail}"
    print(line)
    assert ok, line


# ---------------------------------------------------------------- fixtures

@pytest.fixture(scope="module")
def corpus():
    traces = [synth_generate(SynthConfig(seed=100 + i, trace_id=f"t{i}")) for i in range(16)]
    order = SeededRng(19).permutation(16)
    train_tr = [traces[i] for i in order[:8]]
    val_tr = [traces[i] for i in order[8:10]]
    test_tr = [traces[i] for i in order[10:]]
    norm_train, stats = fit_normalize_many(train_tr)
    return {
        "stats": stats,
        "train": [w for t in norm_train for w in window(t, TIMESTEP, 1)],
        "val": [w for t in val_tr
                for w in window(apply_normalize(t, stats), TIMESTEP, 5)],
        "test": [w for t in test_tr
                 for w in window(apply_normalize(t, stats), TIMESTEP, TIMESTEP)],
        "sig_train": [w for t in norm_train for w in window(t, TIMESTEP, 5)],
        "sig_test": [w for t in test_tr
                     for w in window(apply_normalize(t, stats), TIMESTEP, 5)],
    }


@pytest.fixture(scope="module")
def lstm(corpus):
    tic = time.perf_counter()
    model = build(desk_lstm(TIMESTEP, N_FEATURES), seed=1)
    model, history, _ = train_classifier(model, corpus["train"], corpus["val"],
                                         TrainConfig(epochs=200, patience=30, seed=3))
    elapsed = time.perf_counter() - tic
    model.stats_id = corpus["stats"].stats_id
    return {"model": model, "elapsed": elapsed, "epochs": len(history)}


@pytest.fixture(scope="module")
def gru(corpus):
    model = build(desk_gru(TIMESTEP, N_FEATURES), seed=2)
    model, _, _ = train_classifier(model, corpus["train"], corpus["val"],
                                   TrainConfig(epochs=200, patience=30, seed=4))
    model.stats_id = corpus["stats"].stats_id
    return model


@pytest.fixture(scope="module")
def attack_results(corpus, lstm):
    model = lstm["model"]
    tic = time.perf_counter()
    out = {"clean": evaluate(model, corpus["test"]).accuracy}
    for cfg in (AttackConfig("fgsm", epsilon=EPSILON),
                AttackConfig("pgd", epsilon=EPSILON, alpha=0.01, iterations=20),
                AttackConfig("cw")):        # spec defaults: c=1, kappa=0, 5x1000 iters
        metrics, budget, results = evaluate_under_attack(model, corpus["test"], cfg)
        out[cfg.kind] = {"accuracy": metrics.accuracy, "budget": budget,
                         "results": results}
    out["elapsed"] = time.perf_counter() - tic
    return out


@pytest.fixture(scope="module")
def signatures(corpus, lstm):
    model = lstm["model"]
    tic = time.perf_counter()
    background = make_background(model, corpus["sig_train"], k=100, seed=11)
    kinds = [AttackConfig("fgsm", epsilon=EPSILON),
             AttackConfig("pgd", epsilon=EPSILON, alpha=0.01, iterations=20),
             AttackConfig("cw", binary_search_steps=1)]
    rng = SeededRng(11)
    per_train, per_test = 200, 70
    sel_train = [corpus["sig_train"][i]
                 for i in rng.choice(len(corpus["sig_train"]), 3 * per_train)]
    sel_test = [corpus["sig_test"][i]
                for i in rng.choice(len(corpus["sig_test"]), 3 * per_test)]

    def build_matrix(windows, per):
        benign = signature_matrix(model, np.stack([w.values for w in windows]), background)
        adv_rows = []
        for k, cfg in enumerate(kinds):
            subset = windows[k * per:(k + 1) * per]
            crafted = craft_batch(model, subset, cfg)
            adv_rows.append(signature_matrix(
                model, np.stack([r.values for r in crafted]), background))
        adv = np.concatenate(adv_rows)
        x = np.concatenate([benign, adv])
        y = np.concatenate([np.zeros(len(benign), int), np.ones(len(adv), int)])
        return x, y

    x_tr, y_tr = build_matrix(sel_train, per_train)
    x_ts, y_ts = build_matrix(sel_test, per_test)
    return {"background": background, "train": (x_tr, y_tr), "test": (x_ts, y_ts),
            "elapsed": time.perf_counter() - tic}


@pytest.fixture(scope="module")
def detectors(signatures):
    tic = time.perf_counter()
    out = {}
    for kind in ("rf", "gbt", "ffnn"):
        model = train_detector(signatures["train"], DetectorSpec(kind, seed=13))
        out[kind] = {"model": model,
                     "metrics": evaluate_detector(model, signatures["test"])}
    out["elapsed"] = time.perf_counter() - tic
    return out


@pytest.fixture(scope="module")
def live_runs(corpus, lstm, detectors, signatures):
    model = lstm["model"]
    live_cfg = SynthConfig(seed=777, trace_id="live", frames_per_segment=1200, cycles=1)
    live = apply_normalize(synth_generate(live_cfg), corpus["stats"])
    schedule = InjectionSchedule(
        attack=AttackConfig("pgd", epsilon=EPSILON, alpha=0.01, iterations=20),
        start_seconds=60.0, duration_seconds=120.0)
    gbt = detectors["gbt"]["model"]
    background = signatures["background"]
    runs = {
        "live": live,
        "schedule": schedule,
        "baseline": run_stream(live, model, seed=17, mode="baseline"),
        "attacked": run_stream(live, model, schedule=schedule, seed=17, mode="attacked"),
        "defended": run_stream(live, model, detector=gbt, background=background,
                               schedule=schedule, seed=17, mode="defended"),
    }
    return runs


# ---------------------------------------------------------------- criteria

def test_criterion_01_gradient_correctness():
    rng = SeededRng(2024)
    tic = time.perf_counter()
    worst = 0.0
    for spec in (desk_lstm(TIMESTEP, N_FEATURES), desk_gru(TIMESTEP, N_FEATURES),
                 desk_cnn_lstm(TIMESTEP, N_FEATURES)):
        base = build(spec, seed=7)
        params64 = base.params_as(np.float64)
        x64 = rng.uniform((1, TIMESTEP, N_FEATURES))
        y = np.zeros((1, 4))
        y[0, 2] = 1.0
        leaf_names = sorted(params64)
        checked = 0
        li = 0
        while checked < 100:
            name = leaf_names[li % len(leaf_names)]
            li += 1
            point = params64[name].data
            k = min(8, point.size, 100 - checked)
            coords = [int(c) for c in rng.choice(point.size, k)]

            def fn(leaf, _name=name):
                params = dict(params64)
                params[_name] = leaf
                probe = ClassifierModel(spec=spec, params=params, seed=0)
                logits, _ = probe.forward(Tensor(x64, dtype=np.float64))
                return cross_entropy(logits, Tensor(y, dtype=np.float64))

            report = finite_diff_check(fn, point, tolerance=1e-4, coords=coords)
            worst = max(worst, report.max_rel_error)
            assert report.passed, f"{spec.family}/{name}: {report}"
            checked += k
    elapsed = time.perf_counter() - tic
    _criterion(1, "backward matches central differences (rel err <= 1e-4, "
                  "100 coords x 3 architectures)",
               worst <= 1e-4 and elapsed <= 60.0,
               f"worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_02_clean_training(corpus, lstm):
    acc = evaluate(lstm["model"], corpus["test"]).accuracy
    _criterion(2, "desk LSTM reaches test accuracy >= 0.85 within 200 epochs / 5 min",
               acc >= 0.85 and lstm["elapsed"] <= 300.0 and lstm["epochs"] <= 200,
               f"accuracy {acc:.3f}, {lstm['epochs']} epochs, {lstm['elapsed']:.0f}s")


def test_criterion_03_attack_effectiveness_ordering(attack_results):
    clean = attack_results["clean"]
    fgsm = attack_results["fgsm"]["accuracy"]
    pgd = attack_results["pgd"]["accuracy"]
    cw = attack_results["cw"]["accuracy"]
    ok = (cw <= pgd <= fgsm + 0.01 < clean
          and pgd <= 0.5 * clean
          and attack_results["elapsed"] <= 600.0)
    _criterion(3, "accuracy(C&W) <= accuracy(PGD) <= accuracy(FGSM)+0.01 < clean; "
                  "PGD <= 0.5 x clean",
               ok, f"clean {clean:.3f}, fgsm {fgsm:.3f}, pgd {pgd:.3f}, cw {cw:.3f}, "
                   f"{attack_results['elapsed']:.0f}s")


def test_criterion_04_budget_soundness(attack_results):
    violations = 0
    total = 0
    for kind in ("fgsm", "pgd"):
        for r in attack_results[kind]["results"]:
            total += 1
            if r.linf > EPSILON + 1e-6 or r.values.min() < 0.0 or r.values.max() > 1.0:
                violations += 1
    _criterion(4, "100% of FGSM/PGD windows satisfy Linf <= eps+1e-6 and lie in [0,1]",
               violations == 0 and total > 0,
               f"{total - violations}/{total} windows in budget")


class _LinearToy:
    def __init__(self, w, b, timestep, n_features):
        self.w = np.asarray(w, dtype=np.float32)
        self.b = np.asarray(b, dtype=np.float32)
        self.spec = type("S", (), {"timestep": timestep, "n_features": n_features,
                                   "n_classes": self.w.shape[1]})()
        self.params = {}

    def forward(self, x, training=False, rng=None):
        flat = reshape(x, (x.shape[0], -1))
        logits = matmul(flat, Tensor(self.w)) + Tensor(self.b)
        return logits, flat

    def predict_batch(self, x):
        logits, _ = self.forward(Tensor(np.asarray(x, dtype=np.float32)))
        return softmax(logits).data


def test_criterion_05_cw_optimality():
    rng = SeededRng(99)
    checked, worst_ratio = 0, 1.0
    attempts = 0
    while checked < 20 and attempts < 300:
        attempts += 1
        w = rng.normal((8, 2)).astype(np.float32)
        b = rng.normal(2).astype(np.float32) * 0.1
        x0 = rng.uniform(8, 0.35, 0.65).astype(np.float32).reshape(4, 2)
        logits = x0.reshape(-1) @ w + b
        y = int(np.argmax(logits))
        dw = w[:, 1 - y] - w[:, y]
        dist = (logits[y] - logits[1 - y]) / np.linalg.norm(dw)
        ideal = x0.reshape(-1) + dist * dw / np.linalg.norm(dw)
        if not (0.02 < dist < 0.25) or ideal.min() < 0.05 or ideal.max() > 0.95:
            continue
        model = _LinearToy(w, b, timestep=4, n_features=2)
        cfg = AttackConfig("cw", binary_search_steps=8, inner_iterations=300,
                           inner_learning_rate=0.01)
        adv = craft_cw(model, x0, cfg, true_label=y)
        assert adv.success
        worst_ratio = max(worst_ratio, adv.l2 / dist)
        checked += 1
    _criterion(5, "C&W L2 within 5% of closed-form margin/||dw|| on 20 linear instances",
               checked == 20 and worst_ratio <= 1.05,
               f"worst achieved/optimal ratio {worst_ratio:.4f}")


def test_criterion_06_transferability(corpus, lstm, gru):
    x, y = windows_to_arrays(corpus["test"])
    target = lstm["model"]
    clean = (target.predict_batch(x).argmax(axis=1) == y).mean()
    accs = {}
    for cfg in (AttackConfig("pgd", epsilon=EPSILON, alpha=0.01, iterations=20),
                AttackConfig("cw", confidence=6.0, trade_off=10.0,
                             binary_search_steps=1, inner_iterations=1000,
                             inner_learning_rate=0.02)):
        crafted = craft_batch(gru, corpus["test"], cfg)
        adv = np.stack([r.values for r in crafted])
        accs[cfg.kind] = float((target.predict_batch(adv).argmax(axis=1) == y).mean())
    ok = (clean - accs["pgd"] >= 0.20 and clean - accs["cw"] >= 0.20
          and accs["cw"] <= accs["pgd"] + 0.03)
    _criterion(6, "GRU-crafted PGD and C&W drop LSTM accuracy >= 20 points; "
                  "C&W transfer <= PGD transfer + 3 points",
               ok, f"clean {clean:.3f}, pgd {accs['pgd']:.3f}, cw {accs['cw']:.3f}")


def test_criterion_07_shapley_correctness(corpus, lstm, signatures):
    model = lstm["model"]
    background = signatures["background"]
    # (a) last-layer efficiency on every test window
    x, _ = windows_to_arrays(corpus["test"])
    w_head, _ = model.head_weights()
    mat = signature_matrix(model, x, background)            # (B, C*P)
    h = model.penultimate_batch(x).astype(np.float64)
    gaps = (h - background.mean_h) @ w_head                 # (B, C)
    per_class_sums = mat.reshape(len(x), 4, -1).sum(axis=2)
    eff_gap = float(np.abs(per_class_sums - gaps).max())

    # (b) sampled vs exhaustive on an N=8 toy model
    rng = SeededRng(8)
    w1 = rng.normal((8, 6)).astype(np.float32)
    w2 = rng.normal((6, 2)).astype(np.float32)

    class _Toy:
        spec = type("S", (), {"timestep": 3, "n_features": 8, "n_classes": 2})()
        fingerprint = "toy"

        def forward(self, xx, training=False, rng=None):
            feat = xx.mean(axis=1)
            hidden = relu(matmul(feat, Tensor(w1)))
            return matmul(hidden, Tensor(w2)), hidden

    toy = _Toy()
    bg_windows = rng.uniform((5, 3, 8)).astype(np.float32)
    bg = BackgroundSet(windows=bg_windows, mean_h=np.zeros(6),
                       mean_columns=bg_windows.mean(axis=0), model_fingerprint="toy")
    win = rng.uniform((3, 8)).astype(np.float32)
    exact = shap_input_exact(toy, win, bg, class_index=1)
    sampled = shap_input_sampled(toy, win, bg, class_index=1, n_perm=2000, seed=5)
    bands = np.maximum(3 * sampled.std_error, 1e-9)
    sampled_ok = bool((np.abs(sampled.values - exact.values) <= bands + 1e-9).all())

    # (c) linear model closed form, enumeration mode
    w_lin = np.array([[1.5], [-2.0], [0.5]], dtype=np.float32)

    class _Lin:
        spec = type("S", (), {"timestep": 4, "n_features": 3, "n_classes": 1})()
        fingerprint = "lin"

        def forward(self, xx, training=False, rng=None):
            feat = xx.mean(axis=1)
            return matmul(feat, Tensor(w_lin)), feat

    lin_bg_windows = np.full((3, 4, 3), 0.25, dtype=np.float32)
    lin_bg = BackgroundSet(windows=lin_bg_windows, mean_h=np.zeros(3),
                           mean_columns=lin_bg_windows.mean(axis=0), model_fingerprint="lin")
    lin_win = np.stack([np.full(4, 0.8), np.full(4, 0.1), np.full(4, 0.5)],
                       axis=1).astype(np.float32)
    att = shap_input_exact(_Lin(), lin_win, lin_bg, class_index=0)
    closed = w_lin[:, 0] * (lin_win.mean(axis=0) - 0.25)
    linear_gap = float(np.abs(att.values - closed).max())

    _criterion(7, "Shapley: (a) signature efficiency <= 1e-4 on every window, "
                  "(b) sampled within 3 SE of 2^8 enumeration, (c) linear closed form",
               eff_gap <= 1e-4 and sampled_ok and linear_gap <= 1e-6,
               f"eff gap {eff_gap:.2e}, linear gap {linear_gap:.2e}")


def test_signature_distribution_shift(signatures):
    # spec invariant: adversarial signatures sit farther from the benign centroid
    x, y = signatures["test"]
    benign = x[y == 0]
    adv = x[y == 1]
    assert len(benign) >= 200 and len(adv) >= 200
    centroid = benign.mean(axis=0)
    d_benign = np.linalg.norm(benign - centroid, axis=1).mean()
    d_adv = np.linalg.norm(adv - centroid, axis=1).mean()
    assert d_adv > d_benign, f"adversarial {d_adv:.3f} vs benign {d_benign:.3f}"


def test_criterion_08_detection_accuracy(signatures, detectors):
    accs = {k: detectors[k]["metrics"].accuracy for k in ("rf", "gbt", "ffnn")}
    n_test = len(signatures["test"][1])
    ok = (accs["gbt"] >= 0.85 and accs["rf"] >= 0.80 and accs["ffnn"] >= 0.80
          and n_test >= 400 and detectors["elapsed"] <= 300.0)
    if not (accs["gbt"] >= max(accs["rf"], accs["ffnn"]) - 0.02):
        print(f"[criterion  8] note: detector ordering deviates from the GBT-first "
              f"benchmark pattern: {accs}")
    _criterion(8, "detectors on held-out signatures: GBT >= 0.85, RF/FFNN >= 0.80, "
                  ">= 400 balanced samples",
               ok, f"gbt {accs['gbt']:.3f}, rf {accs['rf']:.3f}, "
                   f"ffnn {accs['ffnn']:.3f}, n={n_test}, {detectors['elapsed']:.0f}s")


def test_attack_strength_monotone_in_epsilon(corpus, lstm):
    # spec property: under-attack accuracy non-increasing in eps (1-point slack)
    model = lstm["model"]
    for kind in ("fgsm", "pgd"):
        accs = []
        for eps in (0.0, 0.025, 0.05, 0.1):
            cfg = (AttackConfig("fgsm", epsilon=eps) if kind == "fgsm" else
                   AttackConfig("pgd", epsilon=eps, alpha=max(eps / 10, 1e-3),
                                iterations=20))
            metrics, _, _ = evaluate_under_attack(model, corpus["test"], cfg)
            accs.append(metrics.accuracy)
        for lo, hi in zip(accs[1:], accs[:-1]):
            assert lo <= hi + 0.01, f"{kind}: accuracy not monotone in eps: {accs}"


def _in_window(events, lo=600, hi=1800):
    return [e for e in events if lo <= e.frame < hi]


def test_criterion_09_closed_loop(live_runs):
    base = {e.frame: e for e in live_runs["baseline"].events}
    attacked = live_runs["attacked"]
    defended = live_runs["defended"]

    att_in = _in_window(attacked.events)
    assert all(e.attack_active for e in att_in)
    disagree = np.mean([e.predicted_label != base[e.frame].predicted_label
                        for e in att_in])

    def_in = _in_window(defended.events)
    alert_rate = np.mean([e.alert for e in def_in])
    action_agree = np.mean([e.action == base[e.frame].action for e in defended.events])

    gate_ok = True
    prev = "no_mitigation"
    for e in defended.events:
        if e.verdict == "attack" and e.action != prev:
            gate_ok = False
        prev = e.action

    ok = disagree >= 0.5 and alert_rate >= 0.8 and action_agree >= 0.8 and gate_ok
    _criterion(9, "closed loop: attacked disagrees >= 50% in-window; defended alerts "
                  ">= 80% in-window, matches baseline actions >= 80%, gate sound",
               ok, f"disagree {disagree:.3f}, alerts {alert_rate:.3f}, "
                   f"action agreement {action_agree:.3f}, gate {'ok' if gate_ok else 'BROKEN'}")


def test_criterion_10_determinism_and_causality(tmp_path, corpus, lstm, detectors,
                                                signatures, live_runs):
    model = lstm["model"]
    live = live_runs["live"]
    schedule = live_runs["schedule"]
    gbt = detectors["gbt"]["model"]
    background = signatures["background"]

    second = run_stream(live, model, detector=gbt, background=background,
                        schedule=schedule, seed=17, mode="defended")
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_event_log(live_runs["defended"], p1, config_hash="x", seed=17, tool_version="v")
    write_event_log(second, p2, config_hash="x", seed=17, tool_version="v")
    identical = p1.read_bytes() == p2.read_bytes()

    cut = 700
    prefix_trace = SensorTrace(trace_id=live.trace_id, sample_rate=live.sample_rate,
                               feature_names=live.feature_names, frames=live.frames[:cut],
                               labels=live.labels[:cut], timestamps=live.timestamps[:cut],
                               norm_stats_id=live.norm_stats_id)
    prefix = run_stream(prefix_trace, model, detector=gbt, background=background,
                        schedule=schedule, seed=17, mode="defended")
    full_lines = [e.to_log_json() for e in live_runs["defended"].events[:len(prefix.events)]]
    prefix_ok = full_lines == [e.to_log_json() for e in prefix.events]

    _criterion(10, "byte-identical event logs across runs; prefix replay reproduces "
                   "the full run's prefix",
               identical and prefix_ok,
               f"identical={identical}, prefix_events={len(prefix.events)}")


def test_criterion_11_latency(live_runs):
    lat = live_runs["baseline"].latency_stats()
    _criterion(11, "desk-scale per-window inference p95 <= 10 ms",
               lat["p95_seconds"] <= 0.010,
               f"p95 {lat['p95_seconds'] * 1000:.2f} ms, "
               f"mean {lat['mean_seconds'] * 1000:.2f} ms")
