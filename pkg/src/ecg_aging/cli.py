"""Command-line pipeline: synth -> features -> split -> train -> evaluate -> explain -> report.

Stages communicate only through files in the output directory. Every stage
writes ``run_<stage>.json`` with its resolved parameters and input digests;
the SHA-256 of that manifest is embedded in every artifact the stage writes.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import attrib, evaluation, features, gbdt, plotting, refnet, synthgen, treeshap
from .beatdetect import DetectionError, detect_rpeaks
from .signal_io import AGE_GROUPS, N_GROUPS, RecordError, impute_missing, read_manifest, \
    resample, write_manifest, write_wfdb16

log = logging.getLogger("ecg_aging")

ENV_OUT = "ECG_AGING_OUT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SYNTH_GAIN = 1000.0   # adu per mV: 1 uV resolution
CE_LR = 1e-3          # cli default for cross-entropy training of the small net


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- run bookkeeping

def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, Path):
        return obj.name
    return obj


def _dumps(doc):
    return json.dumps(_clean(doc), indent=1, sort_keys=True) + "\n"


class Run:
    """Output directory plus the manifest hash stamped into every artifact."""

    def __init__(self, out, stage, params, inputs=None):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        inp = {}
        for role, p in sorted((inputs or {}).items()):
            if p is not None and Path(p).is_file():
                inp[role] = {"name": Path(p).name, "sha256": _sha256_file(p)}
        self.config = {"tool": "ecg_aging", "version": __version__, "stage": stage,
                       "params": _clean(params), "inputs": inp}
        self.hash = hashlib.sha256(
            json.dumps(self.config, sort_keys=True).encode()).hexdigest()
        self.stage = stage
        self.written = []
        self.write_text(f"run_{stage}.json",
                        _dumps({"run_manifest_sha256": self.hash, **self.config}),
                        record=False)

    @property
    def tag(self):
        return f"run_manifest_sha256={self.hash}"

    def path(self, name):
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_text(self, name, text, record=True):
        with open(self.path(name), "w", newline="") as fh:
            fh.write(text)
        if record:
            self.written.append(name)

    def write_json(self, name, doc):
        self.write_text(name, _dumps({**doc, "run_manifest_sha256": self.hash}))

    def write_csv(self, name, header, rows):
        with open(self.path(name), "w", newline="") as fh:
            fh.write(f"# {self.tag}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
        self.written.append(name)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if not math.isfinite(v) else repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))


def _params(args, drop=("func", "out", "verbose")):
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in drop:
            continue
        out[k] = Path(v).name if isinstance(v, str) and os.sep in v else v
    return out


# ---------------------------------------------------------------- shared loading

def _manifest_path(args):
    p = Path(args.manifest) if args.manifest else Path(args.out) / "manifest.csv"
    if not p.is_file():
        raise FileNotFoundError(f"manifest not found: {p}")
    return p


def _need(path, hint):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{path} not found (run `{hint}` first)")
    return Path(path)


def _load(entry):
    rec = entry.load()
    if not np.all(np.isfinite(rec.samples)):
        rec = impute_missing(rec)
    return rec


def _load_split(out):
    rows = _read_csv(_need(Path(out) / "split.csv", "split"))
    return {r["record_id"]: (int(r["group"]), r["split"]) for r in rows}


def _ensure_split(args, run):
    p = Path(args.out) / "split.csv"
    if not p.is_file():
        entries, _ = read_manifest(_manifest_path(args))
        _write_split(run, entries, args.seed)
    return _load_split(args.out)


def _write_split(run, entries, seed):
    ids = [e.record_id for e in entries]
    groups = [e.group.index for e in entries]
    assign = evaluation.stratified_split(ids, groups, seed=seed)
    rows = sorted((rid, g, assign[rid]) for rid, g in zip(ids, groups))
    run.write_csv("split.csv", ("record_id", "group", "split"), rows)
    return assign


def _feature_rows(out, split, which):
    ids, names, X = features.read_feature_table(_need(Path(out) / "features.csv", "features"))
    keep = [i for i, rid in enumerate(ids) if rid in split and split[rid][1] == which]
    return [ids[i] for i in keep], names, X[keep], np.array([split[ids[i]][0] for i in keep],
                                                           dtype=int)


def _model_columns(ens, names, X):
    missing = [n for n in ens.feature_names if n not in names]
    if missing:
        raise ValueError(f"feature table lacks model feature(s) {missing}")
    return X[:, [list(names).index(n) for n in ens.feature_names]]


def _signals(entries, fs):
    out = []
    for e in entries:
        rec = _load(e)
        out.append(np.asarray((resample(rec, fs) if rec.fs != fs else rec).samples))
    return out


def _mapping(text):
    if text is None:
        return np.asarray(evaluation.DEFAULT_CONSOLIDATION)
    try:
        m = [int(t) for t in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"--mapping must be 15 comma-separated integers: {exc}") from None
    return np.asarray(m)


# ---------------------------------------------------------------- stages

def cmd_synth(args):
    spec = synthgen.read_trend_spec(args.trend_spec) if args.trend_spec else \
        synthgen.default_trend_spec(duration=args.duration, fs=args.fs)
    run = Run(args.out, "synth", _params(args), {"trend_spec": args.trend_spec})
    members = synthgen.plan_cohort(spec, args.n_per_group, seed=args.seed)
    rows, truth = [], {}
    for m in members:
        rec, gt = synthgen.synth_record(m.params, m.record_id)
        write_wfdb16(run.out / "records", m.record_id, rec.samples, rec.fs, gain=SYNTH_GAIN,
                     comments=(run.tag, f"age: {m.age}"))
        rows.append({"record_id": m.record_id, "path": f"records/{m.record_id}.hea",
                     "format": "wfdb16", "fs": rec.fs, "age": m.age})
        p = m.params
        truth[m.record_id] = {
            "group": m.group, "age": m.age,
            "breathing_rate_bpm": gt.breathing_rate,
            "p_amplitude_mV": p.wave_amplitudes["P"],
            "p_on_ms": p.wave_offsets["P"] - synthgen.EDGE_WIDTHS * p.wave_widths["P"],
            "p_off_ms": p.wave_offsets["P"] + synthgen.EDGE_WIDTHS * p.wave_widths["P"],
            "wave_offsets_ms": p.wave_offsets, "wave_widths_ms": p.wave_widths,
            "n_beats": int(len(gt.r_times)),
        }
    write_manifest(run.path("manifest.csv"), rows, header_comment=run.tag)
    synthgen.write_trend_spec(run.path("trend_spec.csv"), spec, header_comment=run.tag)
    run.written += ["manifest.csv", "trend_spec.csv"]
    run.write_json("truth.json", {"injected_features": ["HRV_breathing_rate_bpm", "SR_p_mV"],
                                  "injected_wave": "P", "records": truth})
    print(f"synthesised {len(rows)} records into {run.out / 'records'}")


def cmd_ingest(args):
    mpath = _manifest_path(args)
    run = Run(args.out, "ingest", _params(args), {"manifest": mpath})
    entries, excluded = read_manifest(mpath)
    rows, counts = [], np.zeros(N_GROUPS, dtype=int)
    for e in entries:
        try:
            rec = e.load()
        except (RecordError, OSError, ValueError) as exc:
            raise RecordError(f"record {e.record_id}: {exc}") from None
        n_missing = int(np.count_nonzero(~np.isfinite(rec.samples)))
        if n_missing:
            impute_missing(rec)
        rows.append((e.record_id, e.group.index, e.age, rec.fs, rec.samples.size,
                     rec.duration_s, n_missing))
        counts[e.group.index] += 1
    run.write_csv("ingest.csv", ("record_id", "group", "age", "fs", "n_samples", "duration_s",
                                 "n_missing"), rows)
    run.write_json("ingest.json", {"n_records": len(rows), "excluded": excluded,
                                   "group_counts": counts.tolist()})
    print(f"{len(rows)} records ok, {len(excluded)} excluded (no age)")


def cmd_features(args):
    mpath = _manifest_path(args)
    run = Run(args.out, "features", _params(args), {"manifest": mpath})
    entries, _ = read_manifest(mpath)
    vectors, peaks, failed = [], {}, {}
    for e in entries:
        rec = _load(e)
        try:
            rp = detect_rpeaks(rec)
            fv = features.record_feature_vector(rec, rp)
        except DetectionError as exc:
            log.warning("record %s skipped: %s", e.record_id, exc)
            failed[e.record_id] = str(exc)
            continue
        vectors.append(fv)
        peaks[e.record_id] = {"fs": rec.fs, "rpeaks": rp.tolist()}
    if not vectors:
        raise DetectionError("no record yielded features")
    features.write_feature_table(run.path("features.csv"), vectors, features.FEATURE_NAMES,
                                 header_comment=run.tag)
    run.written.append("features.csv")
    run.write_json("rpeaks.json", {"records": peaks, "failed": failed})
    print(f"features for {len(vectors)} records ({len(failed)} failed)")


def cmd_split(args):
    mpath = _manifest_path(args)
    run = Run(args.out, "split", _params(args), {"manifest": mpath})
    entries, _ = read_manifest(mpath)
    assign = _write_split(run, entries, args.seed)
    n = {s: sum(v == s for v in assign.values()) for s in evaluation.SPLITS}
    print(" ".join(f"{k}={v}" for k, v in n.items()))


def cmd_train_gbdt(args):
    out = Path(args.out)
    run = Run(out, "train-gbdt", _params(args),
              {"features": out / "features.csv", "split": out / "split.csv"})
    split = _ensure_split(args, run)
    _, names, Xt, yt = _feature_rows(out, split, "train")
    _, _, Xv, yv = _feature_rows(out, split, "valid")
    empty = np.isnan(Xt).all(axis=0)
    if empty.any():
        log.warning("dropping feature(s) missing for every training record: %s",
                    ", ".join(n for n, e in zip(names, empty) if e))
        names = tuple(n for n, e in zip(names, empty) if not e)
        Xt, Xv = Xt[:, ~empty], Xv[:, ~empty]
    weights = None
    if args.balance == "oversample":
        Xt, yt = gbdt.rebalance_oversample(Xt, yt, seed=args.seed, n_classes=N_GROUPS)
    elif args.balance == "weights":
        weights = gbdt.inverse_frequency_weights(yt, N_GROUPS)[yt]
    cfg = gbdt.TrainConfig(max_depth=args.max_depth, max_leaves=args.max_leaves,
                           learning_rate=args.learning_rate, n_rounds=args.n_rounds,
                           early_stopping_rounds=args.early_stopping or None, seed=args.seed)
    ens = gbdt.fit(Xt, yt, cfg, valid=(Xv, yv), feature_names=names, n_classes=N_GROUPS,
                   sample_weight=weights)
    run.write_text("gbdt_model.json", ens.to_json(
        extra={"run_manifest_sha256": run.hash, "balance": args.balance}) + "\n")
    run.write_csv("gbdt_history.csv", ("round", "valid_macro_auc"),
                  [(h["round"], h["valid_macro_auc"]) for h in ens.history])
    best = max((h["valid_macro_auc"] for h in ens.history), default=math.nan)
    print(f"gbdt: {len(ens.rounds)} rounds kept, best validation macro-AUC {best:.4f}")


def _refnet_inputs(args, split, which):
    entries, _ = read_manifest(_manifest_path(args))
    chosen = sorted((e for e in entries if e.record_id in split and
                     split[e.record_id][1] == which), key=lambda e: e.record_id)
    return chosen, np.array([split[e.record_id][0] for e in chosen], dtype=int)


def cmd_train_refnet(args):
    if args.lr is not None and not (math.isfinite(args.lr) and args.lr >= 0):
        raise UsageError(f"--lr must be a finite number >= 0, got {args.lr}")
    out = Path(args.out)
    run = Run(out, "train-refnet", _params(args),
              {"manifest": _manifest_path(args), "split": out / "split.csv"})
    split = _ensure_split(args, run)
    spec = refnet.NetSpec(seed=args.seed)
    tr, yt = _refnet_inputs(args, split, "train")
    va, yv = _refnet_inputs(args, split, "valid")
    xt, xv = _signals(tr, int(spec.fs)), _signals(va, int(spec.fs))
    weights = None
    if args.balance == "oversample":
        idx, yt = gbdt.rebalance_oversample(np.arange(len(xt))[:, None], yt, seed=args.seed,
                                            n_classes=N_GROUPS)
        xt = [xt[i] for i in idx[:, 0]]
    elif args.balance == "weights":
        weights = "inverse"
    lr = args.lr
    if lr is None and args.loss == "ce":
        # 1e-2 stalls the toy net at the uniform prediction for some seeds
        lr = CE_LR
    cfg = refnet.FitConfig(loss="focal" if args.loss == "focal" else "cross_entropy",
                           gamma=args.gamma, class_weights=weights, lr=lr,
                           max_epochs=args.epochs, crops_per_record=args.crops_per_record,
                           batch_size=args.batch_size, seed=args.seed)

    def show(e):
        log.info("epoch %d lr %.0e train %.4f valid %.4f auc %.4f", e.epoch, e.lr,
                 e.train_loss, e.valid_loss, e.valid_auc)

    res = refnet.fit(xt, yt, spec, cfg, valid=(xv, yv), log=show)
    from dataclasses import asdict
    run.write_text("refnet_model.json", res.net.to_json(extra={
        "run_manifest_sha256": run.hash, "best_epoch": res.best_epoch,
        "stopped_early": res.stopped_early, "fit_config": _clean(asdict(cfg))}) + "\n")
    run.write_csv("refnet_history.csv",
                  ("epoch", "lr", "train_loss", "valid_loss", "valid_macro_auc", "improved",
                   "lr_reduced"),
                  [(h.epoch, h.lr, h.train_loss, h.valid_loss, h.valid_auc, int(h.improved),
                    int(h.lr_reduced)) for h in res.history])
    best = res.history[res.best_epoch].valid_auc if res.best_epoch >= 0 else math.nan
    print(f"refnet: {len(res.history)} epochs, best epoch {res.best_epoch}, "
          f"validation macro-AUC {best:.4f}")


def _scores(args, which):
    out = Path(args.out)
    split = _load_split(out)
    if args.model == "gbdt":
        ens = gbdt.TreeEnsemble.from_json(_need(out / "gbdt_model.json", "train-gbdt").read_text())
        ids, names, X, y = _feature_rows(out, split, which)
        return ids, ens.predict_proba(_model_columns(ens, names, X)), y
    net = refnet.RefNet.from_json(_need(out / "refnet_model.json", "train-refnet").read_text())
    entries, y = _refnet_inputs(args, split, which)
    probs = [refnet.predict_record(net, s) for s in _signals(entries, int(net.spec.fs))]
    return [e.record_id for e in entries], np.stack(probs), y


def cmd_evaluate(args):
    out = Path(args.out)
    model_file = out / ("gbdt_model.json" if args.model == "gbdt" else "refnet_model.json")
    run = Run(out, f"evaluate-{args.model}", _params(args),
              {"model": model_file, "features": out / "features.csv",
               "split": out / "split.csv"})
    ids, probs, y = _scores(args, args.split)
    mapping = _mapping(args.mapping)
    if args.groups == 15:
        report = evaluation.evaluate_scores(probs, y, N_GROUPS, args.n_bootstrap, args.seed,
                                            mapping=mapping)
        labels = [g.label for g in AGE_GROUPS]
    else:
        n4 = int(mapping.max()) + 1
        p4 = evaluation.consolidate_probs(probs, mapping, n4)
        report = evaluation.evaluate_scores(p4, mapping[y], n4, args.n_bootstrap, args.seed)
        labels = [f"consolidated {k}" for k in range(n4)]
    doc = report.to_dict()
    doc.update({"model": args.model, "groups": args.groups, "split": args.split,
                "n_records": len(ids), "class_labels": labels, "table": report.table()})
    run.write_json(f"metrics_{args.model}.json", doc)
    run.write_csv(f"predictions_{args.model}.csv",
                  ("record_id", "label") + tuple(f"p{k}" for k in range(probs.shape[1])),
                  [(rid, int(lab), *p) for rid, lab, p in zip(ids, y, probs)])
    print(report.table())


def cmd_shap_summary(args):
    out = Path(args.out)
    run = Run(out, "shap-summary", _params(args),
              {"model": out / "gbdt_model.json", "features": out / "features.csv",
               "split": out / "split.csv"})
    ens = gbdt.TreeEnsemble.from_json(_need(out / "gbdt_model.json", "train-gbdt").read_text())
    split = _load_split(out)
    ids, names, X, _ = _feature_rows(out, split, "train")
    X = _model_columns(ens, names, X)
    classes = []
    for c in range(ens.n_classes):
        s = treeshap.summarize_class(ens, X, c, k=args.shap_k)
        d = s.to_dict()
        d["class_label"] = AGE_GROUPS[c].label
        classes.append(d)
    run.write_json("shap_summary.json", {"method": treeshap.METHOD, "split": "train",
                                         "k": args.shap_k, "record_ids": ids,
                                         "classes": classes})
    print(f"SHAP summaries for {len(classes)} classes on {len(ids)} training records")


def cmd_saliency(args):
    out = Path(args.out)
    run = Run(out, "saliency", _params(args),
              {"model": out / "refnet_model.json", "manifest": _manifest_path(args),
               "split": out / "split.csv"})
    net = refnet.RefNet.from_json(_need(out / "refnet_model.json", "train-refnet").read_text())
    split = _load_split(out)
    entries, y = _refnet_inputs(args, split, args.split)
    fs = int(net.spec.fs)
    n = net.spec.crop_len
    items = []
    for e, label, sig in zip(entries, y, _signals(entries, fs)):
        crops = refnet.tile_crops(sig, n)[: args.crops_per_record]
        if args.target == "true":
            targets = np.full(len(crops), label)
        else:
            targets = np.argmax(net.forward(crops), axis=1)
        sal = refnet.saliency_batch(net, crops, targets)
        for c in range(len(crops)):
            amap = refnet.AttributionMap(f"{e.record_id}#{c}", e.record_id, sal[c],
                                         int(targets[c]))
            items.append(refnet.attribution_to_dict(amap, crops[c], fs, c * n))
    run.write_json("saliency.json", {"fs": fs, "crop_len": n, "target": args.target,
                                     "split": args.split, "attributions": items})
    print(f"{len(items)} attribution maps from {len(entries)} records")


def cmd_aggregate(args):
    out = Path(args.out)
    mpath = _manifest_path(args)
    run = Run(out, "aggregate", _params(args),
              {"saliency": out / "saliency.json", "rpeaks": out / "rpeaks.json",
               "manifest": mpath})
    doc = json.loads(_need(out / "saliency.json", "saliency").read_text())
    entries, _ = read_manifest(mpath)
    by_id = {e.record_id: e for e in entries}
    peaks_file = out / "rpeaks.json"
    peaks = json.loads(peaks_file.read_text())["records"] if peaks_file.is_file() else {}
    window = attrib.Window(args.window_pre_ms, args.window_post_ms)
    per = {}
    skipped = 0
    for raw in doc["attributions"]:
        a = refnet.attribution_from_dict(raw)
        rid = a["record_id"]
        if rid not in by_id:
            raise RecordError(f"attribution for unknown record {rid!r}")
        if rid not in peaks:
            rec = _load(by_id[rid])
            peaks[rid] = {"fs": rec.fs, "rpeaks": detect_rpeaks(rec).tolist()}
        rp = np.asarray(peaks[rid]["rpeaks"], dtype=float)
        rp = np.round(rp * a["fs"] / peaks[rid]["fs"]).astype(int) - a["crop_start"]
        rp = rp[(rp >= 0) & (rp < a["signal"].size)]
        try:
            pairs = attrib.align_beats(a["signal"], a["attribution"], rp, window, a["fs"])
        except DetectionError:
            skipped += 1
            continue
        per.setdefault(by_id[rid].group.index, {}).setdefault(rid, []).extend(pairs)
    if not per:
        raise DetectionError("no beat fits the window in any attribution crop")
    aggs = [attrib.aggregate_group(per[g], g, window, doc["fs"], args.weighting, args.k_top)
            for g in sorted(per)]
    stats = attrib.segment_stats(aggs)
    run.write_json("aggregated_beats.json", {"aggregates": [a.to_dict() for a in aggs],
                                             "k": args.k_top, "skipped_crops": skipped})
    run.write_json("segment_stats.json", stats.to_dict())
    for s in attrib.SEGMENTS:
        print(f"{s:9s} {stats.percentages[s]:6.2f}%")


def cmd_report(args):
    out = Path(args.out)
    rep = "report"
    inputs = {n: out / n for n in ("shap_summary.json", "aggregated_beats.json",
                                   "segment_stats.json", "metrics_gbdt.json",
                                   "metrics_refnet.json")}
    inputs["manifest"] = _manifest_path(args)
    run = Run(out, "report", _params(args), inputs)
    labels = [g.label for g in AGE_GROUPS]

    entries, _ = read_manifest(inputs["manifest"])
    counts = np.bincount([e.group.index for e in entries], minlength=N_GROUPS)
    run.write_csv(f"{rep}/fig1_age_histogram.csv", ("group", "label", "n_records"),
                  [(g, labels[g], int(c)) for g, c in enumerate(counts)])
    plotting.age_histogram(run.path(f"{rep}/fig1_age_histogram.png"), labels, counts, run.tag)
    run.written.append(f"{rep}/fig1_age_histogram.png")

    if inputs["shap_summary.json"].is_file():
        shap = json.loads(inputs["shap_summary.json"].read_text())
        rank_rows, point_rows, panels = [], [], []
        for c in shap["classes"]:
            for r, item in enumerate(c["ranking"]):
                rank_rows.append((c["class_id"], c["class_label"], r + 1, item["feature"],
                                  item["mean_abs_phi"]))
            phi = np.array(c["phi"], dtype=float)
            val = np.array([[math.nan if v is None else v for v in row] for row in c["values"]])
            for j, name in enumerate(c["top_features"]):
                for i in range(phi.shape[0]):
                    point_rows.append((c["class_id"], j + 1, name, i, phi[i, j], val[i, j]))
            panels.append({"class_label": c["class_label"], "features": c["top_features"],
                           "phi": phi, "values": val})
        run.write_csv(f"{rep}/fig2_shap_ranking.csv",
                      ("class_id", "class_label", "rank", "feature", "mean_abs_phi"), rank_rows)
        run.write_csv(f"{rep}/fig2_shap_points.csv",
                      ("class_id", "rank", "feature", "sample", "phi", "value"), point_rows)
        plotting.shap_beeswarm(run.path(f"{rep}/fig2_shap_summary.png"), panels, tag=run.tag)
        run.written.append(f"{rep}/fig2_shap_summary.png")

    if inputs["aggregated_beats.json"].is_file():
        aggs = [attrib.AggregatedBeat.from_dict(d) for d in
                json.loads(inputs["aggregated_beats.json"].read_text())["aggregates"]]
        beat_rows, sal_rows, panels = [], [], []
        for a in aggs:
            t = a.time_ms()
            top = set(a.topk_indices)
            for i in range(t.size):
                beat_rows.append((a.group, labels[a.group], t[i], a.mean_signal[i]))
                sal_rows.append((a.group, labels[a.group], t[i], a.mean_signal[i],
                                 a.mean_attribution[i], int(i in top)))
            panels.append({"label": f"{labels[a.group]} ({a.n_subjects} subj, "
                                    f"{a.n_heartbeats} beats)",
                           "time_ms": t, "signal": a.mean_signal,
                           "attribution": a.mean_attribution, "topk": a.topk_indices})
        run.write_csv(f"{rep}/fig4_mean_beats.csv", ("group", "label", "time_ms", "mV"),
                      beat_rows)
        plotting.mean_beats(run.path(f"{rep}/fig4_mean_beats.png"), aggs[0].time_ms(),
                            [a.mean_signal for a in aggs], [labels[a.group] for a in aggs],
                            run.tag)
        run.write_csv(f"{rep}/fig5_saliency.csv",
                      ("group", "label", "time_ms", "mV", "saliency", "is_topk"), sal_rows)
        plotting.saliency_beats(run.path(f"{rep}/fig5_saliency.png"), panels, run.tag)
        run.written += [f"{rep}/fig4_mean_beats.png", f"{rep}/fig5_saliency.png"]

    if inputs["segment_stats.json"].is_file():
        st = json.loads(inputs["segment_stats.json"].read_text())
        run.write_csv(f"{rep}/table_segments.csv", ("segment", "count", "percent"),
                      [(s, st["counts"][s], st["percentages"][s]) for s in attrib.SEGMENTS])

    series, auc_rows, tables = {}, [], {}
    for model in ("gbdt", "refnet"):
        f = inputs[f"metrics_{model}.json"]
        if not f.is_file():
            continue
        m = json.loads(f.read_text())
        series[model] = m["per_class_auc"]
        tables[model] = m["table"]
        for g, a in enumerate(m["per_class_auc"]):
            auc_rows.append((model, g, m["class_labels"][g], math.nan if a is None else a))
    if series:
        run.write_csv(f"{rep}/fig6_auc_bars.csv", ("model", "class_id", "label", "auc"),
                      auc_rows)
        n = max(len(v) for v in series.values())
        plotting.auc_bars(run.path(f"{rep}/fig6_auc_bars.png"),
                          labels if n == N_GROUPS else [str(k) for k in range(n)], series,
                          run.tag)
        run.written.append(f"{rep}/fig6_auc_bars.png")
    run.write_json(f"{rep}/index.json", {"files": sorted(run.written), "tables": tables})
    for model, t in sorted(tables.items()):
        print(f"[{model}]\n{t}")
    print(f"report written to {run.out / rep}")


# ---------------------------------------------------------------- parser

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--out", default=os.environ.get(ENV_OUT, "ecg_aging_out"),
                        help=f"output directory (default ${ENV_OUT} or ./ecg_aging_out)")
    common.add_argument("--manifest", default=None,
                        help="cohort manifest CSV (default <out>/manifest.csv)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ecg-aging", description="ECG age-group classification pipeline")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="synthetic cohort with known age trends")
    s.add_argument("--n-per-group", type=int, default=40)
    s.add_argument("--duration", type=float, default=330.0, help="seconds per record")
    s.add_argument("--fs", type=int, default=500)
    s.add_argument("--trend-spec", default=None, help="per-group parameter CSV")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", parents=[common], help="validate and summarise a cohort")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("features", parents=[common], help="R-peaks, HRV and waveform features")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("split", parents=[common], help="stratified train/valid/test split")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train-gbdt", parents=[common], help="boosted trees on features")
    s.add_argument("--balance", choices=("none", "oversample", "weights"), default="none")
    s.add_argument("--n-rounds", type=int, default=200)
    s.add_argument("--learning-rate", type=float, default=0.008)
    s.add_argument("--max-depth", type=int, default=10)
    s.add_argument("--max-leaves", type=int, default=10)
    s.add_argument("--early-stopping", type=int, default=50,
                   help="rounds without validation improvement (0 disables)")
    s.set_defaults(func=cmd_train_gbdt)

    s = sub.add_parser("train-refnet", parents=[common], help="CNN on raw 3 s crops")
    s.add_argument("--loss", choices=("focal", "ce"), default="ce")
    s.add_argument("--gamma", type=float, default=2.0)
    s.add_argument("--lr", type=float, default=None,
                   help="initial learning rate (default 1e-5 focal, %g ce)" % CE_LR)
    s.add_argument("--balance", choices=("none", "oversample", "weights"), default="none")
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--crops-per-record", type=int, default=8)
    s.add_argument("--batch-size", type=int, default=32)
    s.set_defaults(func=cmd_train_refnet)

    s = sub.add_parser("evaluate", parents=[common], help="metrics with bootstrap intervals")
    s.add_argument("--model", choices=("gbdt", "refnet"), default="gbdt")
    s.add_argument("--split", choices=evaluation.SPLITS, default="test")
    s.add_argument("--groups", type=int, choices=(15, 4), default=15)
    s.add_argument("--mapping", default=None, help="15 comma-separated consolidated ids")
    s.add_argument("--n-bootstrap", type=int, default=1000)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("shap-summary", parents=[common], help="TreeSHAP rankings per class")
    s.add_argument("--shap-k", type=int, default=10)
    s.set_defaults(func=cmd_shap_summary)

    s = sub.add_parser("saliency", parents=[common], help="gradient saliency maps for crops")
    s.add_argument("--split", choices=evaluation.SPLITS, default="train")
    s.add_argument("--crops-per-record", type=int, default=8)
    s.add_argument("--target", choices=("predicted", "true"), default="predicted")
    s.set_defaults(func=cmd_saliency)

    s = sub.add_parser("aggregate", parents=[common], help="beat-aligned saliency per group")
    s.add_argument("--window-pre-ms", type=float, default=300.0)
    s.add_argument("--window-post-ms", type=float, default=500.0)
    s.add_argument("--k-top", type=int, default=8)
    s.add_argument("--weighting", choices=attrib.WEIGHTINGS, default="per_subject")
    s.set_defaults(func=cmd_aggregate)

    s = sub.add_parser("report", parents=[common], help="plot data (CSV/JSON) and PNG figures")
    s.add_argument("--groups", type=int, choices=(15, 4), default=15)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"ecg-aging: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"ecg-aging: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (refnet.TrainingError, FloatingPointError, ArithmeticError,
            np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"ecg-aging: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RecordError, DetectionError, OSError, ValueError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"ecg-aging: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
