"""Command-line orchestration of the full pipeline with file-based handoff.

    vrguard <command> --config cfg.json [--seed N] [--output-dir DIR]
                      [--threads N] [--set section.key=value ...]

Commands: synth | train | eval | attack | transfer | explain | sign |
fit-detector | detect-eval | simulate | compare | report.

Exit codes: 0 success, 1 contract violation, 2 I/O or schema error.
Artifacts embed {tool version, config hash, seed}; rerunning a command with
unchanged config and inputs rewrites byte-identical files, except the
explicitly non-deterministic `*.latency.json` timing measurements.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import classifiers, data, detector as det, explain, pipeline
from .attacks import AttackConfig, craft_batch, evaluate_under_attack, transfer_matrix
from .config import apply_dotted_override, config_hash, load_config
from .errors import (
    ContractViolation,
    DataFormatError,
    ModelFormatError,
    SchemaError,
)
from .numerics import SeededRng
from .numerics.rng import _mix64_int


def _meta(chash: str, seed: int) -> dict:
    return {"tool_version": __version__, "config_hash": chash, "seed": seed}


def _write_json(path: Path, doc: dict, chash: str, seed: int) -> None:
    doc = dict(doc)
    doc["_meta"] = _meta(chash, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _csv_header(chash: str, seed: int) -> str:
    return f"# vrguard {__version__} config={chash} seed={seed}\n"


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise SchemaError(f"missing artifact {path}; produce it with `vrguard {producer}`")
    return path


# shared loading -----------------------------------------------------------------

def _synth_config(cfg: dict, seed: int, trace_id: str) -> data.SynthConfig:
    d = cfg["data"]
    return data.SynthConfig(n_features=d["n_features"],
                            frames_per_segment=d["frames_per_segment"],
                            cycles=d["cycles"], sample_rate=d["sample_rate"],
                            ar_coeff=d["ar_coeff"], noise_scale=d["noise_scale"],
                            osc_amp=d["osc_amp"], seed=seed, trace_id=trace_id)


def _load_traces(out: Path):
    manifest = json.loads(_require(out / "data" / "manifest.json", "synth").read_text())
    return [data.load_trace(str(out / "data" / name), trace_id=name.rsplit(".", 1)[0])
            for name in manifest["traces"]]


def _split_traces(cfg: dict, traces):
    """Grouped split at trace granularity: whole traces per split."""
    fractions = cfg["data"]["fractions"]
    if len(fractions) != 3 or any(f < 0 for f in fractions) \
            or abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractViolation("data.fractions must be three non-negative values summing to 1")
    rng = SeededRng(cfg["seeds"]["split"])
    order = rng.permutation(len(traces))
    n = len(traces)
    targets = [f * n for f in fractions]
    counts = [int(t) for t in targets]
    for _ in range(n - sum(counts)):
        rema = [targets[i] - counts[i] for i in range(3)]
        counts[int(np.argmax(rema))] += 1
    parts, pos = [], 0
    for c in counts:
        parts.append([traces[i] for i in order[pos:pos + c]])
        pos += c
    return parts


def _load_stats(out: Path) -> data.NormalizationStats:
    doc = json.loads(_require(out / "model" / "stats.json", "train").read_text())
    return data.NormalizationStats.from_json(doc)


def _load_model(out: Path, family: str) -> classifiers.ClassifierModel:
    path = _require(out / "model" / f"{family}.vrg",
                    f"train --set model.family={family}")
    return classifiers.load(path)


def _split_windows(cfg: dict, out: Path, which: str, stride: int):
    """Windows of one split, normalized with the trained model's stats."""
    split_doc = json.loads(_require(out / "model" / "split.json", "train").read_text())
    stats = _load_stats(out)
    traces = {t.trace_id: t for t in _load_traces(out)}
    wins = []
    for tid in split_doc[which]:
        trace = data.apply_normalize(traces[tid], stats)
        wins.extend(data.window(trace, cfg["data"]["timestep"], stride))
    return wins, stats


def _arch_for(cfg: dict, family: str) -> classifiers.ArchSpec:
    d = cfg["data"]
    scale = cfg["model"]["scale"]
    presets = {
        ("lstm", "desk"): classifiers.desk_lstm, ("gru", "desk"): classifiers.desk_gru,
        ("cnn_lstm", "desk"): classifiers.desk_cnn_lstm,
        ("lstm", "paper"): classifiers.paper_lstm, ("gru", "paper"): classifiers.paper_gru,
        ("cnn_lstm", "paper"): classifiers.paper_cnn_lstm,
    }
    try:
        preset = presets[(family, scale)]
    except KeyError:
        raise SchemaError(f"no preset for family={family!r} scale={scale!r}") from None
    return preset(timestep=d["timestep"], n_features=d["n_features"])


def _attack_config(cfg: dict, kind: str, seed=None) -> AttackConfig:
    a = cfg["attack"]
    return AttackConfig(kind=kind, epsilon=a["epsilon"], alpha=a["alpha"],
                        iterations=a["iterations"], confidence=a["cw_confidence"],
                        trade_off=a["cw_trade_off"],
                        binary_search_steps=a["cw_binary_search_steps"],
                        inner_iterations=a["cw_inner_iterations"],
                        inner_learning_rate=a["cw_inner_learning_rate"],
                        seed=cfg["seeds"]["attack"] if seed is None else seed)


def _detector_spec(cfg: dict, kind: str) -> det.DetectorSpec:
    d = cfg["detector"]
    return det.DetectorSpec(kind=kind, rf_trees=d["rf_trees"], rf_max_depth=d["rf_max_depth"],
                            gbt_estimators=d["gbt_estimators"],
                            gbt_learning_rate=d["gbt_learning_rate"],
                            gbt_max_depth=d["gbt_max_depth"],
                            ffnn_epochs=d["ffnn_epochs"], ffnn_batch=d["ffnn_batch"],
                            ffnn_learning_rate=d["ffnn_learning_rate"],
                            threshold=d["threshold"], seed=cfg["seeds"]["detector"])


def _background(cfg: dict, out: Path, model):
    train_w, _ = _split_windows(cfg, out, "train", cfg["data"]["signature_stride"])
    benign = [w for w in train_w]
    return explain.make_background(model, benign, k=cfg["explain"]["background_k"],
                                   seed=cfg["seeds"]["background"])


# commands --------------------------------------------------------------------------

def cmd_synth(cfg, chash, out, args):
    d_dir = out / "data"
    d_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(cfg["data"]["n_traces"]):
        name = f"trace{i:02d}.csv"
        trace = data.synth_generate(_synth_config(cfg, cfg["seeds"]["data"] + i,
                                                  name.rsplit(".", 1)[0]))
        data.save_trace_csv(trace, d_dir / name)
        names.append(name)
    _write_json(d_dir / "manifest.json", {"traces": names}, chash, cfg["seeds"]["data"])
    print(f"synth: wrote {len(names)} traces to {d_dir}")


def cmd_train(cfg, chash, out, args):
    traces = _load_traces(out)
    train_tr, val_tr, test_tr = _split_traces(cfg, traces)
    if not train_tr or not val_tr:
        raise ContractViolation("split produced an empty train or validation trace set")
    norm_train, stats = data.fit_normalize_many(train_tr)
    model_dir = out / "model"
    model_dir.mkdir(parents=True, exist_ok=True)
    _write_json(model_dir / "stats.json", stats.to_json(), chash, cfg["seeds"]["split"])
    _write_json(model_dir / "split.json",
                {"train": [t.trace_id for t in train_tr],
                 "val": [t.trace_id for t in val_tr],
                 "test": [t.trace_id for t in test_tr]},
                chash, cfg["seeds"]["split"])

    d = cfg["data"]
    train_w = [w for t in norm_train for w in data.window(t, d["timestep"], d["train_stride"])]
    val_w = [w for t in val_tr
             for w in data.window(data.apply_normalize(t, stats), d["timestep"], d["val_stride"])]
    family = cfg["model"]["family"]
    model = classifiers.build(_arch_for(cfg, family), seed=cfg["seeds"]["model"])
    tc = classifiers.TrainConfig(learning_rate=cfg["train"]["learning_rate"],
                                 epochs=cfg["train"]["epochs"],
                                 batch_size=cfg["train"]["batch_size"],
                                 patience=cfg["train"]["patience"],
                                 seed=cfg["seeds"]["train"])
    model, history, best = classifiers.train(model, train_w, val_w, tc)
    model.stats_id = stats.stats_id
    classifiers.save(model, model_dir / f"{family}.vrg", extra_meta=_meta(chash, model.seed))
    _write_json(model_dir / f"history_{family}.json",
                {"best_epoch": best, "epochs": [asdict(h) for h in history]},
                chash, cfg["seeds"]["train"])
    print(f"train: {family} best epoch {best}, "
          f"val acc {history[best].val_accuracy:.3f}, saved to {model_dir}")


def cmd_eval(cfg, chash, out, args):
    family = cfg["model"]["family"]
    model = _load_model(out, family)
    test_w, _ = _split_windows(cfg, out, "test", cfg["data"]["eval_stride"])
    metrics = classifiers.evaluate(model, test_w)
    doc = metrics.to_json()
    doc["family"] = family
    doc["n_windows"] = len(test_w)
    _write_json(out / "eval" / f"metrics_{family}.json", doc, chash, cfg["seeds"]["model"])
    print(f"eval: {family} clean accuracy {metrics.accuracy:.3f} on {len(test_w)} windows")


def _write_adversarial_set(out_dir: Path, kind: str, results, feature_names, cfg_a,
                           budget, chash, seed):
    """Window container CSV plus a JSON sidecar with config and budgets."""
    csv_path = out_dir / f"adv_{kind}.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(_csv_header(chash, seed))
        fh.write("window_id,step,label," + ",".join(feature_names) + "\n")
        for r in results:
            for step in range(r.values.shape[0]):
                row = [r.window_id or "", str(step), data.LABELS[r.true_label]]
                row += [repr(float(v)) for v in r.values[step]]
                fh.write(",".join(row) + "\n")
    sidecar = {
        "attack_config": asdict(cfg_a),
        "budget": budget.to_json(),
        "windows": [{"id": r.window_id, "success": r.success, "linf": r.linf,
                     "l2": r.l2, "true_label": r.true_label,
                     "adversarial_label": r.adversarial_label} for r in results],
    }
    _write_json(out_dir / f"adv_{kind}.json", sidecar, chash, seed)


def cmd_attack(cfg, chash, out, args):
    family = cfg["model"]["family"]
    model = _load_model(out, family)
    test_w, stats = _split_windows(cfg, out, "test", cfg["data"]["eval_stride"])
    clean = classifiers.evaluate(model, test_w)
    rows = [{"attack": "none", "accuracy": clean.accuracy,
             "macro_precision": clean.macro_precision, "macro_recall": clean.macro_recall,
             "macro_f1": clean.macro_f1, "mean_pcc": 1.0, "mean_linf": 0.0,
             "mean_l2": 0.0, "success_rate": 0.0}]
    a_dir = out / "attack"
    a_dir.mkdir(parents=True, exist_ok=True)
    for kind in cfg["attack"]["kinds"]:
        cfg_a = _attack_config(cfg, kind)
        metrics, budget, results = evaluate_under_attack(model, test_w, cfg_a)
        rows.append({"attack": kind, "accuracy": metrics.accuracy,
                     "macro_precision": metrics.macro_precision,
                     "macro_recall": metrics.macro_recall, "macro_f1": metrics.macro_f1,
                     "mean_pcc": budget.mean_pcc, "mean_linf": budget.mean_linf,
                     "mean_l2": budget.mean_l2, "success_rate": budget.success_rate})
        _write_adversarial_set(a_dir, kind, results, stats.feature_names, cfg_a,
                               budget, chash, cfg["seeds"]["attack"])
        print(f"attack: {kind} accuracy {metrics.accuracy:.3f} "
              f"(clean {clean.accuracy:.3f}), mean PCC {budget.mean_pcc:.3f}")
    _write_json(a_dir / "table.json", {"rows": rows, "family": family}, chash,
                cfg["seeds"]["attack"])
    with open(a_dir / "table.csv", "w", encoding="utf-8") as fh:
        fh.write(_csv_header(chash, cfg["seeds"]["attack"]))
        cols = list(rows[0])
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c])
                              for c in cols) + "\n")


def cmd_transfer(cfg, chash, out, args):
    families = cfg["attack"]["transfer_families"]
    models = {fam: _load_model(out, fam) for fam in families}
    test_w, _ = _split_windows(cfg, out, "test", cfg["data"]["eval_stride"])
    cfgs = [_attack_config(cfg, kind) for kind in cfg["attack"]["kinds"]]
    tm = transfer_matrix(models, test_w, cfgs)
    a_dir = out / "attack"
    a_dir.mkdir(parents=True, exist_ok=True)
    _write_json(a_dir / "transfer.json", {"rows": tm.to_rows()}, chash, cfg["seeds"]["attack"])
    with open(a_dir / "transfer.csv", "w", encoding="utf-8") as fh:
        fh.write(_csv_header(chash, cfg["seeds"]["attack"]))
        fh.write("source,target,attack,accuracy\n")
        for r in tm.to_rows():
            fh.write(f"{r['source']},{r['target']},{r['attack']},{r['accuracy']:.6f}\n")
    print(f"transfer: {len(families)}x{len(families)} matrix over {len(cfgs)} attacks")


def cmd_explain(cfg, chash, out, args):
    family = cfg["model"]["family"]
    model = _load_model(out, family)
    test_w, _ = _split_windows(cfg, out, "test", cfg["data"]["eval_stride"])
    background = _background(cfg, out, model)
    rng = SeededRng(cfg["seeds"]["explain"])
    chosen = [test_w[i] for i in rng.choice(len(test_w),
                                            min(cfg["explain"]["n_local_windows"], len(test_w)))]
    attributions = []
    for w in chosen:
        cls = model.predict_label(w)
        attributions.append(explain.shap_input_sampled(
            model, w, background, cls, n_perm=cfg["explain"]["n_permutations"],
            seed=cfg["seeds"]["explain"]))
    ranking = explain.global_importance(attributions)
    e_dir = out / "explain"
    e_dir.mkdir(parents=True, exist_ok=True)
    names = _load_stats(out).feature_names
    with open(e_dir / "global_importance.csv", "w", encoding="utf-8") as fh:
        fh.write(_csv_header(chash, cfg["seeds"]["explain"]))
        fh.write("rank,feature_index,feature_name,mean_abs_attribution\n")
        for rank, (idx, score) in enumerate(ranking):
            fh.write(f"{rank},{idx},{names[idx]},{score:.8f}\n")
    local = attributions[0]
    _write_json(e_dir / "local_example.json",
                {"window_id": chosen[0].window_id, "class_index": local.class_index,
                 "values": local.values.tolist(), "std_error": local.std_error.tolist(),
                 "features": names},
                chash, cfg["seeds"]["explain"])
    print(f"explain: top feature {names[ranking[0][0]]} "
          f"(mean |attribution| {ranking[0][1]:.5f})")


def cmd_sign(cfg, chash, out, args):
    family = cfg["model"]["family"]
    model = _load_model(out, family)
    kinds = cfg["attack"]["kinds"]
    per_tr = cfg["detector"]["per_kind_train"]
    per_ts = cfg["detector"]["per_kind_test"]
    stride = cfg["data"]["signature_stride"]
    train_w, _ = _split_windows(cfg, out, "train", stride)
    test_w, _ = _split_windows(cfg, out, "test", stride)
    if len(train_w) < len(kinds) * per_tr or len(test_w) < len(kinds) * per_ts:
        raise ContractViolation(
            f"not enough windows for signatures: need {len(kinds) * per_tr} train "
            f"and {len(kinds) * per_ts} test, have {len(train_w)}/{len(test_w)}")
    rng = SeededRng(cfg["seeds"]["background"])
    train_sel = [train_w[i] for i in rng.choice(len(train_w), len(kinds) * per_tr)]
    test_sel = [test_w[i] for i in rng.choice(len(test_w), len(kinds) * per_ts)]
    background = _background(cfg, out, model)

    repo = explain.SignatureRepository()
    for split_name, windows in (("train", train_sel), ("test", test_sel)):
        mat = explain.signature_matrix(model, np.stack([w.values for w in windows]),
                                       background)
        repo.append([explain.XaiSignature(values=mat[i], model_fingerprint=model.fingerprint,
                                          window_id=windows[i].window_id, label=0,
                                          split=split_name)
                     for i in range(len(windows))])
    for split_name, windows, per in (("train", train_sel, per_tr), ("test", test_sel, per_ts)):
        for k, kind in enumerate(kinds):
            subset = windows[k * per:(k + 1) * per]
            results = craft_batch(model, subset, _attack_config(cfg, kind))
            mat = explain.signature_matrix(model, np.stack([r.values for r in results]),
                                           background)
            repo.append([explain.XaiSignature(values=mat[i],
                                              model_fingerprint=model.fingerprint,
                                              window_id=results[i].window_id, label=1,
                                              split=split_name)
                         for i in range(len(results))])
            print(f"sign: {split_name}/{kind}: {len(results)} adversarial signatures "
                  f"(attack success {np.mean([r.success for r in results]):.2f})")
    s_dir = out / "sign"
    s_dir.mkdir(parents=True, exist_ok=True)
    repo.save(s_dir / "repository.jsonl")
    print(f"sign: repository holds {len(repo)} signatures")


def cmd_fit_detector(cfg, chash, out, args):
    repo = explain.SignatureRepository.load(
        _require(out / "sign" / "repository.jsonl", "sign"))
    x, y, _ = repo.dataset("train")
    d_dir = out / "detector"
    d_dir.mkdir(parents=True, exist_ok=True)
    for kind in cfg["detector"]["kinds"]:
        model = det.train_detector((x, y), _detector_spec(cfg, kind))
        det.save_detector(model, d_dir / f"{kind}.det",
                          extra_meta=_meta(chash, cfg["seeds"]["detector"]))
        print(f"fit-detector: {kind} trained on {len(x)} signatures")


def cmd_detect_eval(cfg, chash, out, args):
    repo = explain.SignatureRepository.load(
        _require(out / "sign" / "repository.jsonl", "sign"))
    x, y, _ = repo.dataset("test")
    rows = []
    for kind in cfg["detector"]["kinds"]:
        model = det.load_detector(_require(out / "detector" / f"{kind}.det", "fit-detector"))
        m = det.evaluate_detector(model, (x, y))
        rows.append({"detector": kind, "accuracy": m.accuracy,
                     "f1_normal": m.f1_normal, "f1_attack": m.f1_attack})
        print(f"detect-eval: {kind} accuracy {m.accuracy:.3f} "
              f"(F1 normal {m.f1_normal:.3f} / attack {m.f1_attack:.3f})")
    d_dir = out / "detector"
    _write_json(d_dir / "eval.json", {"rows": rows, "n_test": len(x)}, chash,
                cfg["seeds"]["detector"])
    with open(d_dir / "eval.csv", "w", encoding="utf-8") as fh:
        fh.write(_csv_header(chash, cfg["seeds"]["detector"]))
        fh.write("detector,accuracy,f1_normal,f1_attack\n")
        for r in rows:
            fh.write(f"{r['detector']},{r['accuracy']:.6f},{r['f1_normal']:.6f},"
                     f"{r['f1_attack']:.6f}\n")


def cmd_simulate(cfg, chash, out, args):
    family = cfg["model"]["family"]
    model = _load_model(out, family)
    stats = _load_stats(out)
    p = cfg["pipeline"]
    live_cfg = _synth_config(cfg, cfg["seeds"]["live_trace"], "live")
    live_cfg.frames_per_segment = p["live_frames_per_segment"]
    live_cfg.cycles = p["live_cycles"]
    live = data.apply_normalize(data.synth_generate(live_cfg), stats)
    schedule = pipeline.InjectionSchedule(
        attack=_attack_config(cfg, p["attack_kind"], seed=cfg["seeds"]["pipeline"]),
        start_seconds=p["start_seconds"], duration_seconds=p["duration_seconds"])
    background = _background(cfg, out, model)
    detector_model = det.load_detector(
        _require(out / "detector" / f"{p['detector_kind']}.det", "fit-detector"))

    s_dir = out / "sim"
    s_dir.mkdir(parents=True, exist_ok=True)
    runs = {
        "baseline": dict(schedule=None, detector=None),
        "attacked": dict(schedule=schedule, detector=None),
        "defended": dict(schedule=schedule, detector=detector_model),
    }
    for mode, kw in runs.items():
        report = pipeline.run_stream(live, model, detector=kw["detector"],
                                     background=background if kw["detector"] else None,
                                     schedule=kw["schedule"], seed=cfg["seeds"]["pipeline"],
                                     decision_interval=p["decision_interval"], mode=mode)
        pipeline.write_event_log(report, s_dir / f"{mode}.events.jsonl", config_hash=chash,
                                 seed=cfg["seeds"]["pipeline"], tool_version=__version__)
        _write_json(s_dir / f"{mode}.summary.json", report.summary(), chash,
                    cfg["seeds"]["pipeline"])
        # timing is a measurement, not a deterministic artifact
        _write_json(s_dir / f"{mode}.latency.json", report.latency_stats(), chash,
                    cfg["seeds"]["pipeline"])
        s = report.summary()
        print(f"simulate: {mode} accuracy {s['prediction_accuracy']:.3f}, "
              f"alerts {s['alerts']}, attack frames {s['attack_frames']}")


def _events_to_report(path: Path) -> pipeline.RunReport:
    header, events = pipeline.read_event_log(path)
    evs = [pipeline.PipelineEvent(frame=e["frame"], time_seconds=e["t"],
                                  true_label=e["true"], predicted_label=e["pred"],
                                  probabilities=e["probs"], attack_active=e["attack_active"],
                                  verdict=e["verdict"], action=e["action"],
                                  alert=e["alert"], latency_seconds=0.0)
           for e in events]
    return pipeline.RunReport(mode=header["mode"], events=evs,
                              truncated_schedule=header.get("truncated_schedule", False))


def cmd_compare(cfg, chash, out, args):
    s_dir = out / "sim"
    base = _events_to_report(_require(s_dir / "baseline.events.jsonl", "simulate"))
    others = [_events_to_report(_require(s_dir / f"{mode}.events.jsonl", "simulate"))
              for mode in ("baseline", "attacked", "defended")]
    rows = pipeline.compare_runs(base, others)
    pipeline.comparison_csv(rows, s_dir / "comparison.csv", config_hash=chash,
                            seed=cfg["seeds"]["pipeline"], tool_version=__version__)
    for r in rows:
        print(f"compare: {r['mode']} action agreement {r['action_agreement']:.3f}, "
              f"alerts {r['alerts']}")


def _svg_timeline(series: dict, path: Path, width=900, height=220) -> None:
    """Minimal self-contained SVG line chart (severity level vs frame)."""
    colors = {"actual": "#444444", "baseline": "#1f77b4", "attacked": "#d62728",
              "defended": "#2ca02c"}
    n = max(len(v) for v in series.values())
    pad = 30
    def sx(i):
        return pad + i * (width - 2 * pad) / max(n - 1, 1)
    def sy(v):
        return height - pad - v * (height - 2 * pad) / 3.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    parts.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    for label, vals in series.items():
        pts = " ".join(f"{sx(i):.1f},{sy(v):.1f}" for i, v in enumerate(vals))
        color = colors.get(label, "#888888")
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.2"/>')
    for k, (label, _) in enumerate(series.items()):
        color = colors.get(label, "#888888")
        parts.append(f'<text x="{pad + 110 * k}" y="14" fill="{color}" font-size="11">{label}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts), encoding="utf-8")


def cmd_report(cfg, chash, out, args):
    lines = [f"# vrguard run report", "",
             f"- tool version: {__version__}", f"- config hash: `{chash}`", ""]

    eval_dir = out / "eval"
    if eval_dir.exists():
        lines.append("## Clean classification")
        lines.append("")
        lines.append("| model | accuracy | macro precision | macro recall | macro F1 |")
        lines.append("|---|---|---|---|---|")
        for f in sorted(eval_dir.glob("metrics_*.json")):
            doc = json.loads(f.read_text())
            lines.append(f"| {doc['family']} | {doc['accuracy']:.3f} | "
                         f"{doc['macro_precision']:.3f} | {doc['macro_recall']:.3f} | "
                         f"{doc['macro_f1']:.3f} |")
        lines.append("")

    table = out / "attack" / "table.json"
    if table.exists():
        doc = json.loads(table.read_text())
        lines += ["## Accuracy under attack", "",
                  "| attack | accuracy | macro F1 | mean PCC | mean Linf | success rate |",
                  "|---|---|---|---|---|---|"]
        for r in doc["rows"]:
            lines.append(f"| {r['attack']} | {r['accuracy']:.3f} | {r['macro_f1']:.3f} | "
                         f"{r['mean_pcc']:.3f} | {r['mean_linf']:.4f} | "
                         f"{r['success_rate']:.3f} |")
        lines.append("")

    transfer = out / "attack" / "transfer.json"
    if transfer.exists():
        doc = json.loads(transfer.read_text())
        lines += ["## Black-box transferability (accuracy after transfer)", "",
                  "| source | target | attack | accuracy |", "|---|---|---|---|"]
        for r in doc["rows"]:
            lines.append(f"| {r['source']} | {r['target']} | {r['attack']} | "
                         f"{r['accuracy']:.3f} |")
        lines.append("")

    deval = out / "detector" / "eval.json"
    if deval.exists():
        doc = json.loads(deval.read_text())
        lines += ["## Attack detection", "",
                  "| detector | accuracy | F1 normal | F1 attack |", "|---|---|---|---|"]
        for r in doc["rows"]:
            lines.append(f"| {r['detector']} | {r['accuracy']:.3f} | {r['f1_normal']:.3f} | "
                         f"{r['f1_attack']:.3f} |")
        lines.append("")

    s_dir = out / "sim"
    if (s_dir / "comparison.csv").exists():
        lines += ["## Closed-loop simulation", "",
                  "| mode | action agreement | prediction agreement | alerts |",
                  "|---|---|---|---|"]
        with open(s_dir / "comparison.csv", encoding="utf-8") as fh:
            rows = [r for r in fh if r.strip() and not r.startswith(("#", "mode,"))]
        for r in rows:
            mode, frames, aa, pa, alerts = r.strip().split(",")
            lines.append(f"| {mode} | {float(aa):.3f} | {float(pa):.3f} | {alerts} |")
        lines.append("")
        # per-frame series for the timeline figures
        series_pred, series_action = {}, {}
        for mode in ("baseline", "attacked", "defended"):
            p = s_dir / f"{mode}.events.jsonl"
            if not p.exists():
                continue
            _, events = pipeline.read_event_log(p)
            if "actual" not in series_pred:
                series_pred["actual"] = [e["true"] for e in events]
            series_pred[mode] = [e["pred"] for e in events]
            series_action[mode] = [e["action"] for e in events]
        with open(out / "fig_predictions.csv", "w", encoding="utf-8") as fh:
            fh.write(_csv_header(chash, cfg["seeds"]["pipeline"]))
            cols = list(series_pred)
            fh.write("frame," + ",".join(cols) + "\n")
            for i in range(len(series_pred["actual"])):
                fh.write(",".join([str(i)] + [str(series_pred[c][i]) for c in cols]) + "\n")
        with open(out / "fig_actions.csv", "w", encoding="utf-8") as fh:
            fh.write(_csv_header(chash, cfg["seeds"]["pipeline"]))
            cols = list(series_action)
            fh.write("frame," + ",".join(cols) + "\n")
            for i in range(len(next(iter(series_action.values())))):
                fh.write(",".join([str(i)] + [series_action[c][i] for c in cols]) + "\n")
        _svg_timeline(series_pred, out / "fig_predictions.svg")
        lines.append("Per-frame series: `fig_predictions.csv`, `fig_actions.csv`, "
                     "`fig_predictions.svg`.")
        lines.append("")

    (out / "report.md").write_text("\n".join(lines), encoding="utf-8")
    print(f"report: wrote {out / 'report.md'}")


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "attack": cmd_attack,
    "transfer": cmd_transfer, "explain": cmd_explain, "sign": cmd_sign,
    "fit-detector": cmd_fit_detector, "detect-eval": cmd_detect_eval,
    "simulate": cmd_simulate, "compare": cmd_compare, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vrguard", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="path to the run-config JSON")
    parser.add_argument("--seed", type=int, default=None,
                        help="master seed; derives every per-stage seed")
    parser.add_argument("--output-dir", default=None)
    parser.add_argument("--threads", type=int, default=None,
                        help="parallelism bound (recorded; execution is sequential)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set model.family=gru")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        for item in args.set:
            if "=" not in item:
                raise SchemaError(f"--set expects KEY=VALUE, got {item!r}")
            dotted, raw = item.split("=", 1)
            apply_dotted_override(cfg, dotted, raw)
        if args.output_dir:
            cfg["output_dir"] = args.output_dir
        if args.threads is not None:
            if args.threads < 1:
                raise ContractViolation("--threads must be >= 1")
            cfg["threads"] = args.threads
        if args.seed is not None:
            for name in list(cfg["seeds"]):
                tag = int.from_bytes(name.encode(), "little")
                cfg["seeds"][name] = _mix64_int(args.seed ^ _mix64_int(tag)) % (1 << 31)
        chash = config_hash(cfg)
        out = Path(cfg["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, chash, out, args)
        return 0
    except (DataFormatError, ModelFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
