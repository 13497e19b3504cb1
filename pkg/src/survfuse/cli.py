"""Pipeline entry point.

Subcommands: simulate | prototype | train | stratify | explain, all driven
by one JSON config file plus repeatable --set KEY=VALUE overrides (flags
beat file values). Every artifact lands under the configured output
directory and is byte-identical for a pinned config and seed.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

from . import __version__
from .attribution import (attention_summary, compute_background,
                          export_reports_csv, export_reports_json,
                          export_specific_shared_scatter,
                          multimodal_attribution, representation_contribution,
                          unimodal_attribution)
from .data import (SimulationConfig, generate_cohort, load_cohort,
                   save_cohort, split_stratified, truncate_followup)
from .errors import ConfigError, DataError, NumericalError, SurvfuseError
from .metrics import (concordance_index, concordance_index_ipcw,
                      disentanglement_report, export_km_curves,
                      export_stratification, kaplan_meier, stratify_by_median)
from .model import (ModelConfig, features_from, forward_batch, init_params,
                    load_checkpoint, save_checkpoint)
from .numerics import Rng, no_grad
from .objectives import TrainConfig, save_history, train
from .prototyping import (export_top_assignments, fit_prototypes,
                          load_prototypes, save_prototypes)
from .serialize import dump_json, load_json

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "runs/default",
    "data": {
        "manifest": None,            # default: <output_dir>/cohort/manifest.json
    },
    "simulate": {
        "n_samples": 600, "n_sites": 10, "d_patch": 16,
        "shared_dim": 2, "image_dim": 2, "gene_dim": 2,
        "n_patch_components": 8, "component_scale": 3.0, "patch_noise": 1.0,
        "mix_strength": 1.3, "patches_min": 48, "patches_max": 96,
        "n_genes": 200, "n_pathways": 50,
        "pathway_min_genes": 4, "pathway_max_genes": 10,
        "gene_signal": 1.0, "gene_noise": 0.5,
        "hazard_shared": 1.1, "hazard_image": 0.9, "hazard_gene": 0.9,
        "baseline_hazard": 0.02, "censor_rate": 0.3, "site_shift": 0.25,
        "admin_cutoff": None,
    },
    "model": {
        "n_prototypes": 16, "token_dim": 64, "fused_dim": 64,
        "snn_hidden": 128, "pathway_token_width": 32,
        "n_heads": 1, "attention_residual": False,
    },
    "prototype": {
        "max_kmeans_patches": 160000, "kmeans_iters": 50,
        "em_iters": 30, "em_tol": 1e-6, "top_patches": 3,
    },
    "train": {
        "epochs": 30, "batch_size": 64, "learning_rate": 1e-4,
        "weight_decay": 1e-5, "lambda_surv": 1.0, "lambda_dis": 7.0,
        "folds": 5, "truncate_months": 120.0,
    },
    "metrics": {
        "ipcw_tau": 120.0,
    },
    "explain": {
        "fold": 0, "permutations": 24, "n_samples": 24, "top_k": 3,
    },
}


# -- config handling -----------------------------------------------------------

def _merge_checked(defaults, user, path=""):
    merged = copy.deepcopy(defaults)
    if not isinstance(user, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    for key, value in user.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict):
            merged[key] = _merge_checked(defaults[key], value, path + key + ".")
        else:
            merged[key] = value
    return merged


def _apply_override(config, assignment):
    if "=" not in assignment:
        raise ConfigError(f"--set expects KEY=VALUE, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    parts = key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def load_config(args):
    if not os.path.exists(args.config):
        raise ConfigError(f"config file not found: {args.config}")
    try:
        user = load_json(args.config)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    config = _merge_checked(DEFAULT_CONFIG, user)
    for assignment in args.set or []:
        _apply_override(config, assignment)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.out is not None:
        config["output_dir"] = args.out
    if not isinstance(config["seed"], int):
        raise ConfigError("seed must be an integer")
    # Validate eagerly so commands never start work on a bad config.
    _simulation_config(config)
    _train_config(config, 0)
    for key in ("permutations", "n_samples", "top_k", "fold"):
        if not isinstance(config["explain"][key], int) or config["explain"][key] < 0:
            raise ConfigError(f"explain.{key} must be a non-negative integer")
    if config["explain"]["permutations"] < 1 or config["explain"]["n_samples"] < 1:
        raise ConfigError("explain.permutations and explain.n_samples must be >= 1")
    if config["metrics"]["ipcw_tau"] <= 0:
        raise ConfigError("metrics.ipcw_tau must be positive")
    return config


def _simulation_config(config):
    return SimulationConfig(**config["simulate"]).validate()


def _train_config(config, seed):
    section = config["train"]
    if not isinstance(section["folds"], int) or section["folds"] < 2:
        raise ConfigError("train.folds must be an integer >= 2")
    if section["truncate_months"] <= 0:
        raise ConfigError("train.truncate_months must be positive")
    return TrainConfig(
        epochs=section["epochs"], batch_size=section["batch_size"],
        learning_rate=section["learning_rate"],
        weight_decay=section["weight_decay"],
        lambda_surv=section["lambda_surv"], lambda_dis=section["lambda_dis"],
        seed=seed).validate()


def _model_config(config, d_patch, pathway_sizes):
    m = config["model"]
    return ModelConfig(
        n_prototypes=m["n_prototypes"], d_patch=d_patch,
        pathway_sizes=tuple(pathway_sizes), token_dim=m["token_dim"],
        fused_dim=m["fused_dim"], snn_hidden=m["snn_hidden"],
        pathway_token_width=m["pathway_token_width"], n_heads=m["n_heads"],
        attention_residual=m["attention_residual"]).validate()


def _manifest_path(config):
    manifest = config["data"]["manifest"]
    if manifest is None:
        manifest = os.path.join(config["output_dir"], "cohort", "manifest.json")
    return manifest


def _load_truncated_cohort(config):
    cohort = load_cohort(_manifest_path(config))
    return truncate_followup(cohort, config["train"]["truncate_months"])


# -- commands -------------------------------------------------------------------

def cmd_simulate(config):
    sim = _simulation_config(config)
    seed = Rng(config["seed"]).child("simulate").seed
    cohort, truth = generate_cohort(sim, seed)
    out_dir = os.path.join(config["output_dir"], "cohort")
    save_cohort(cohort, out_dir)
    truth.save(os.path.join(out_dir, "ground_truth.json"))
    censored = 1.0 - np.mean([s.event for s in cohort.samples])
    sites = sorted({s.site_id for s in cohort.samples})
    print(f"simulated cohort: n={len(cohort)} censored={100 * censored:.1f}% "
          f"sites={len(sites)}")
    print(f"manifest: {os.path.join(out_dir, 'manifest.json')}")
    return 0


def cmd_prototype(config):
    cohort = load_cohort(_manifest_path(config))
    proto = config["prototype"]
    seed = Rng(config["seed"]).child("prototype").seed
    pset = fit_prototypes(
        cohort.samples, cohort.samples, config["model"]["n_prototypes"], seed,
        max_kmeans_patches=proto["max_kmeans_patches"],
        kmeans_iters=proto["kmeans_iters"], em_iters=proto["em_iters"],
        em_tol=proto["em_tol"])
    out_dir = os.path.join(config["output_dir"], "prototypes")
    os.makedirs(out_dir, exist_ok=True)
    save_prototypes(pset, os.path.join(out_dir, "prototypes.json"))
    rows_path = os.path.join(out_dir, "top_assignments.csv")
    _export_all_top_assignments(cohort, pset, proto["top_patches"], rows_path)
    print(f"fitted {config['model']['n_prototypes']} prototypes over "
          f"{len(cohort)} slides")
    return 0


def _export_all_top_assignments(cohort, pset, top_m, path):
    from .prototyping import responsibilities, top_assignments
    from .serialize import write_csv
    rows = []
    for s in cohort.samples:
        model = pset.model_for(s.sample_id)
        m = min(top_m, s.patch_features.shape[0])
        resp = responsibilities(model, s.patch_features)
        for proto, indices in enumerate(top_assignments(model, s.patch_features, m)):
            for rank, idx in enumerate(indices, start=1):
                rows.append([s.sample_id, proto, rank, idx, float(resp[idx, proto])])
    write_csv(path, ["sample_id", "prototype", "rank", "patch_index",
                     "responsibility"], rows)


def _predict_risks(params, features):
    risks = []
    with no_grad():
        for start in range(0, len(features), 64):
            out = forward_batch(features[start:start + 64], params)
            risks.extend(float(r) for r in out.risks.data)
    return np.array(risks)


def _pooled_stacks(params, features):
    stacks = {s: [] for s in ("gg", "hh", "hg", "gh")}
    with no_grad():
        for start in range(0, len(features), 64):
            out = forward_batch(features[start:start + 64], params)
            for s in stacks:
                stacks[s].append(out.pooled[s].data)
    return {s: np.concatenate(v, axis=0) for s, v in stacks.items()}


def cmd_train(config):
    cohort = _load_truncated_cohort(config)
    if not any(s.event for s in cohort.samples):
        raise DataError("cohort has no observed events")
    k = config["train"]["folds"]
    split = split_stratified(cohort, k, Rng(config["seed"]).child("split").seed)
    proto = config["prototype"]
    by_id = {s.sample_id: s for s in cohort.samples}

    train_dir = os.path.join(config["output_dir"], "train")
    os.makedirs(train_dir, exist_ok=True)

    fold_records = []
    for fold_idx in range(k):
        test_ids = split.folds[fold_idx]
        test_set = set(test_ids)
        train_samples = [s for s in cohort.samples if s.sample_id not in test_set]
        test_samples = [by_id[i] for i in test_ids]

        seed = Rng(config["seed"]).child(f"fold/{fold_idx}")
        pset = fit_prototypes(
            train_samples, cohort.samples, config["model"]["n_prototypes"],
            seed.child("prototype").seed,
            max_kmeans_patches=proto["max_kmeans_patches"],
            kmeans_iters=proto["kmeans_iters"], em_iters=proto["em_iters"],
            em_tol=proto["em_tol"])
        train_feats = [features_from(s, pset.model_for(s.sample_id))
                       for s in train_samples]
        test_feats = [features_from(s, pset.model_for(s.sample_id))
                      for s in test_samples]

        model_config = _model_config(config, cohort.d_patch, cohort.catalog.sizes)
        train_config = _train_config(config, seed.child("train").seed)
        params, history = train(train_feats, train_config, model_config)

        fold_dir = os.path.join(train_dir, f"fold_{fold_idx}")
        os.makedirs(fold_dir, exist_ok=True)
        save_checkpoint(params, os.path.join(fold_dir, "checkpoint.json"))
        save_history(history, os.path.join(fold_dir, "history.csv"))
        save_prototypes(pset, os.path.join(fold_dir, "prototypes.json"))

        risks = _predict_risks(params, test_feats)
        times = np.array([f.time for f in test_feats])
        events = np.array([f.event for f in test_feats])
        cindex = concordance_index(risks, times, events)
        ipcw = concordance_index_ipcw(risks, times, events,
                                      config["metrics"]["ipcw_tau"])
        report = disentanglement_report(_pooled_stacks(params, test_feats))
        fold_records.append({
            "fold": fold_idx,
            "n_train": len(train_feats),
            "n_test": len(test_feats),
            "test_sites": sorted({s.site_id for s in test_samples}),
            "test_sample_ids": list(test_ids),
            "c_index": cindex,
            "c_index_ipcw": ipcw,
            "d1": report.d1, "d2": report.d2, "total_dc": report.total,
            "d1_orth": report.d1_orth, "d2_orth": report.d2_orth,
            "total_orth": report.total_orth,
            "loss_first": history[0].loss_total if history else None,
            "loss_last": history[-1].loss_total if history else None,
        })
        print(f"fold {fold_idx}: C-index={cindex:.3f} IPCW={ipcw:.3f} "
              f"total-DC={report.total:.3f}")

    aggregate = {}
    for key in ("c_index", "c_index_ipcw", "d1", "d2", "total_dc",
                "d1_orth", "d2_orth", "total_orth"):
        values = np.array([rec[key] for rec in fold_records])
        aggregate[key] = {"mean": float(values.mean()), "std": float(values.std())}
    results = {
        "version": __version__,
        "config": config,
        "folds": fold_records,
        "aggregate": aggregate,
    }
    dump_json(results, os.path.join(train_dir, "results.json"))
    for key, label in (("c_index", "C-index"), ("c_index_ipcw", "C-index IPCW"),
                       ("total_dc", "Total DC")):
        a = aggregate[key]
        print(f"{label}: {a['mean']:.3f} ± {a['std']:.3f}")
    return 0


def _fold_test_features(config, cohort, results, fold_idx):
    train_dir = os.path.join(config["output_dir"], "train")
    fold_dir = os.path.join(train_dir, f"fold_{fold_idx}")
    checkpoint = os.path.join(fold_dir, "checkpoint.json")
    if not os.path.exists(checkpoint):
        raise DataError(f"checkpoint not found: {checkpoint}")
    params = load_checkpoint(checkpoint)
    pset = load_prototypes(os.path.join(fold_dir, "prototypes.json"))
    by_id = {s.sample_id: s for s in cohort.samples}
    test_ids = results["folds"][fold_idx]["test_sample_ids"]
    feats = [features_from(by_id[i], pset.model_for(i)) for i in test_ids]
    return params, pset, feats


def _load_results(config):
    path = os.path.join(config["output_dir"], "train", "results.json")
    if not os.path.exists(path):
        raise DataError(f"training results not found: {path} (run train first)")
    return load_json(path)


def cmd_stratify(config):
    cohort = _load_truncated_cohort(config)
    results = _load_results(config)
    pooled_risks, pooled_times, pooled_events = [], [], []
    for fold_idx in range(len(results["folds"])):
        params, _, feats = _fold_test_features(config, cohort, results, fold_idx)
        pooled_risks.append(_predict_risks(params, feats))
        pooled_times.extend(f.time for f in feats)
        pooled_events.extend(f.event for f in feats)
    risks = np.concatenate(pooled_risks)
    times = np.array(pooled_times)
    events = np.array(pooled_events)

    result, high = stratify_by_median(risks, times, events)
    out_dir = os.path.join(config["output_dir"], "stratify")
    os.makedirs(out_dir, exist_ok=True)
    export_km_curves(os.path.join(out_dir, "km_curves.csv"),
                     [("high", kaplan_meier(times[high], events[high])),
                      ("low", kaplan_meier(times[~high], events[~high]))])
    export_stratification(os.path.join(out_dir, "stratification.json"), result)
    print(f"stratified {len(risks)} pooled test samples: HR={result.hazard_ratio:.3f} "
          f"chi2={result.chi_square:.3f} p={result.p_value:.2e} "
          f"(n_high={result.n_high}, n_low={result.n_low})")
    return 0


def cmd_explain(config):
    cohort = _load_truncated_cohort(config)
    results = _load_results(config)
    fold_idx = config["explain"]["fold"]
    if fold_idx >= len(results["folds"]):
        raise ConfigError(f"explain.fold={fold_idx} out of range "
                          f"({len(results['folds'])} folds)")
    params, pset, test_feats = _fold_test_features(config, cohort, results, fold_idx)
    test_ids = set(results["folds"][fold_idx]["test_sample_ids"])
    background_feats = [features_from(s, pset.model_for(s.sample_id))
                        for s in cohort.samples if s.sample_id not in test_ids]
    background = compute_background(background_feats, params)

    n_explain = min(config["explain"]["n_samples"], len(test_feats))
    chosen = test_feats[:n_explain]
    pathway_names = [p.name for p in cohort.catalog.entries]
    m = config["explain"]["permutations"]
    base_rng = Rng(config["seed"]).child(f"explain/{fold_idx}")

    uni_reports, multi_reports = [], []
    for sample in chosen:
        uni_reports.append(unimodal_attribution(
            params, sample, background, m,
            base_rng.child(f"uni/{sample.sample_id}").seed, pathway_names))
        multi_reports.append(multimodal_attribution(
            params, sample, background, m,
            base_rng.child(f"multi/{sample.sample_id}").seed, pathway_names))

    out_dir = os.path.join(config["output_dir"], "explain")
    os.makedirs(out_dir, exist_ok=True)
    export_reports_json(uni_reports, os.path.join(out_dir, "unimodal.json"))
    export_reports_csv(uni_reports, os.path.join(out_dir, "unimodal.csv"))
    export_reports_json(multi_reports, os.path.join(out_dir, "multimodal.json"))
    export_reports_csv(multi_reports, os.path.join(out_dir, "multimodal.csv"))
    export_specific_shared_scatter(
        multi_reports, params.config.n_prototypes,
        os.path.join(out_dir, "specific_shared_scatter.csv"))

    contributions = representation_contribution(params, chosen, background)
    dump_json(contributions, os.path.join(out_dir, "representation_contribution.json"))

    summary = attention_summary(params, test_feats, config["explain"]["top_k"])
    dump_json({
        "mean_attention": {s: summary.mean_attention[s] for s in summary.mean_attention},
        "top_attended": {s: [[[j, w] for j, w in row] for row in rows]
                         for s, rows in summary.top_attended.items()},
    }, os.path.join(out_dir, "attention_summary.json"))

    print(f"explained {len(chosen)} samples from fold {fold_idx} "
          f"(specific share={contributions['specific']:.3f}, "
          f"shared share={contributions['shared']:.3f})")
    return 0


# -- entry point ------------------------------------------------------------------

COMMANDS = {
    "simulate": cmd_simulate,
    "prototype": cmd_prototype,
    "train": cmd_train,
    "stratify": cmd_stratify,
    "explain": cmd_explain,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="survfuse",
        description="Disentangled bimodal survival pipeline on synthetic cohorts")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="override seed")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry (repeatable)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
        os.makedirs(config["output_dir"], exist_ok=True)
        return COMMANDS[args.command](config)
    except SurvfuseError as exc:
        kind = {ConfigError: "config", DataError: "data",
                NumericalError: "numerical"}.get(type(exc), "error")
        print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
