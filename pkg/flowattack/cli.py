"""Command-line pipeline: gen-data, train-flow, train-classifier, attack, detect, evaluate.

    python -m flowattack gen-data --kind two-moons --n 1000 --out runs/data
    python -m flowattack train-flow --data runs/data/data.nftd --epochs 50 --out runs/flow
    python -m flowattack attack --config attack.cfg --max-queries 2000 --out runs/advflow

Every command writes into a fresh directory and records its resolved configuration in
``config.resolved`` there. Logs go to stderr; files are byte-reproducible for a fixed seed.
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from tqdm import tqdm

from .attack import AttackConfig, AttackResult, run_attack
from .blackbox import (AdvTrainConfig, ClassifierTrainConfig, ToyClassifier, adversarial_train,
                       load_classifier, save_classifier, train_classifier)
from .config import COMMAND_KEYS, RunConfig, format_value, derived_seed, parse_config_text
from .containers import read_tensor, write_tensor
from .datasets import infer_bounds, make_dataset
from .detect import (build_detection_dataset, detector_report, evaluate_detector, fit_class_gaussians,
                     latent_shift, train_detector)
from .errors import ConditioningError, ConfigError, ContractError, EXIT_OK, FlowAttackError, exit_code_for
from .evaluate import (TransferSource, lemma1_check, perturbation_covariance, query_stats, success_curve,
                       transferability)
from .flowmodel import FlowConfig, FlowModel, FlowTrainConfig, init_flow, load_flow, save_flow, train_mle
from .records import AttackRecord, read_json, read_records, write_json, write_records
from .threat import Bounds

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
FLOW_VARIANTS = ("advflow", "greedy", "highres")
DESCRIPTIONS = {
    "gen-data": "generate a toy dataset (data.nftd, labels.nftd, dataset.json)",
    "train-flow": "train a Real NVP flow by maximum likelihood (flow.ckpt)",
    "train-classifier": "train a toy target classifier, optionally with PGD (classifier.ckpt)",
    "attack": "run a black-box attack over a dataset (results.jsonl, report.json)",
    "detect": "fit a Mahalanobis detector against attack runs (detect_report.json)",
    "evaluate": "query statistics, success curves, transfer and flow checks (evaluation.json)",
}


def _fresh_dir(path: str) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise ConfigError(f"output directory {out} is not fresh")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(cfg: RunConfig, *names: str) -> None:
    missing = [n for n in names if not cfg[n]]
    if missing:
        raise ConfigError(f"{cfg.command} needs {', '.join(missing)}")


def _labels(path: str) -> np.ndarray:
    return read_tensor(path).astype(np.int64).ravel()


def _bounds(cfg: RunConfig, data_path: str, data: np.ndarray) -> Bounds:
    if cfg["bounds"]:
        if len(cfg["bounds"]) != 2 or cfg["bounds"][0] >= cfg["bounds"][1]:
            raise ConfigError(f"bounds must be 'lo,hi' with lo < hi, got {cfg['bounds']}")
        return tuple(cfg["bounds"])
    meta = Path(data_path).with_name("dataset.json")
    if meta.exists():
        return tuple(read_json(meta)["bounds"])
    return infer_bounds(data)


# --------------------------------------------------------------------------
# gen-data / training
# --------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    ds = make_dataset(cfg["kind"], cfg["n"], cfg.rng("data"), noise=cfg["noise"])
    write_tensor(out / "data.nftd", ds.data)
    write_tensor(out / "labels.nftd", ds.labels.astype(np.float32))
    write_json(out / "dataset.json", {**ds.metadata(), "seed": cfg.seed})


def cmd_train_flow(cfg: RunConfig, out: Path) -> None:
    _require(cfg, "data")
    data = read_tensor(cfg["data"])
    flow_cfg = FlowConfig(
        kind="image" if data.ndim >= 3 else "dense",
        input_shape=data.shape[1:],
        hidden=cfg["hidden"],
        blocks=cfg["blocks"],
        highres_blocks=cfg["highres_blocks"],
        lowres_blocks=cfg["lowres_blocks"],
        fc_blocks=cfg["fc_blocks"],
        clamp_alpha=cfg["clamp_alpha"],
        exit_fraction=cfg["exit_fraction"],
        final_init_std=cfg["final_init_std"],
        seed=derived_seed(cfg.seed, "init"),
    )
    model = init_flow(flow_cfg)
    report: dict[str, Any] = {"untrained": cfg["untrained"], "kind": flow_cfg.kind,
                              "input_shape": list(flow_cfg.input_shape)}
    if not cfg["untrained"]:
        train_cfg = FlowTrainConfig(
            epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], lr_final=cfg["lr_final"],
            weight_decay=cfg["weight_decay"], dequant_std=cfg["dequant_std"],
            holdout_fraction=cfg["holdout_fraction"], seed=derived_seed(cfg.seed, "train"),
        )
        result = train_mle(model, data, train_cfg)
        report.update(result.to_dict())
        report["final_holdout_nll"] = result.final_holdout_nll
    save_flow(model, out / "flow.ckpt")
    write_json(out / "train_report.json", report)


def cmd_train_classifier(cfg: RunConfig, out: Path) -> None:
    _require(cfg, "data", "labels")
    data = read_tensor(cfg["data"])
    labels = _labels(cfg["labels"])
    bounds = _bounds(cfg, cfg["data"], data)
    common = dict(hidden=cfg["hidden"], epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                  weight_decay=cfg["weight_decay"], seed=derived_seed(cfg.seed, "train"))
    if cfg["adversarial"]:
        train_cfg = AdvTrainConfig(**common, epsilon=cfg["epsilon"], step=cfg["pgd_step"], steps=cfg["pgd_steps"])
        clf = adversarial_train(data, labels, train_cfg, bounds)
    else:
        clf = train_classifier(data, labels, ClassifierTrainConfig(**common), bounds)
    save_classifier(clf, out / "classifier.ckpt")
    write_json(out / "train_report.json", {**clf.report.to_dict(), "accuracy": clf.accuracy(data, labels),
                                           "bounds": list(bounds)})


# --------------------------------------------------------------------------
# attack
# --------------------------------------------------------------------------

def _attack_config(cfg: RunConfig, bounds: Bounds, index: int) -> AttackConfig:
    return AttackConfig(
        sigma=cfg["sigma"], lr=cfg["lr"], population=cfg["population"], max_queries=cfg["max_queries"],
        epsilon=cfg["epsilon"], check_interval=cfg["check_interval"], top_k=cfg["top_k"],
        seed=derived_seed(cfg.seed, "attack", index), variant=cfg["variant"], bounds=bounds,
        mu_init_std=cfg["mu_init_std"], pgd_step=cfg["pgd_step"], pgd_iters=cfg["pgd_iters"],
    )


def _check_dims(variant: str, flow: FlowModel | None, item_shape: tuple[int, ...]) -> None:
    size = int(np.prod(item_shape))
    if flow is None:
        return
    if variant == "highres":
        if flow.dim > size or len(flow.input_shape) != len(item_shape):
            raise ContractError(f"flow of shape {flow.input_shape} cannot attack inputs of shape {item_shape}")
    elif flow.dim != size:
        raise ContractError(f"flow dimension {flow.dim} does not match input shape {item_shape}")


def cmd_attack(cfg: RunConfig, out: Path) -> None:
    _require(cfg, "data", "labels", "classifier")
    variant = cfg["variant"]
    data = read_tensor(cfg["data"])
    labels = _labels(cfg["labels"])
    if len(data) != len(labels):
        raise ContractError(f"{len(data)} inputs but {len(labels)} labels")
    clf = load_classifier(cfg["classifier"])
    flow = None
    if variant in FLOW_VARIANTS:
        _require(cfg, "flow")
        flow = load_flow(cfg["flow"])
    _check_dims(variant, flow, data.shape[1:])
    if cfg["jobs"] < 1:
        raise ConfigError("jobs must be >= 1")
    # validates the attack keys before any query is spent
    _attack_config(cfg, clf.bounds, 0)

    stop = len(data) if cfg["limit"] <= 0 else min(len(data), cfg["start"] + cfg["limit"])
    indices = list(range(cfg["start"], stop))

    def attack_one(i: int) -> tuple[AttackRecord, AttackResult]:
        attack_cfg = _attack_config(cfg, clf.bounds, i)
        x = data[i].astype(np.float64)
        correct = bool(clf.predict(x[None])[0] == labels[i])
        oracle = clf.oracle(budget=attack_cfg.max_queries)
        result = run_attack(attack_cfg, oracle, x, int(labels[i]), flow=flow, classifier=clf)
        record = AttackRecord(i, variant, result.success, result.queries, result.total_queries,
                              result.linf, attack_cfg.seed, correct)
        return record, result

    logger.info("attacking %d inputs with %s (epsilon %.4g, %d queries, %d jobs)",
                len(indices), variant, cfg["epsilon"], cfg["max_queries"], cfg["jobs"])
    with ThreadPoolExecutor(max_workers=cfg["jobs"]) as pool:
        outcomes = list(tqdm(pool.map(attack_one, indices), total=len(indices), desc=variant,
                             disable=None, leave=False))

    records = [r for r, _ in outcomes]
    adversarial = np.stack([res.x_adv if res.success else data[i] for i, (_, res) in zip(indices, outcomes)]) \
        if outcomes else np.zeros((0, *data.shape[1:]))
    write_records(out / "results.jsonl", records)
    write_tensor(out / "adversarial.nftd", adversarial)
    report = query_stats({variant: records})
    document = report.to_dict()
    document["attack"] = {"variant": variant, "epsilon": cfg["epsilon"], "max_queries": cfg["max_queries"],
                          "indices": [indices[0], indices[-1]] if indices else []}
    write_json(out / "report.json", document)
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    logger.info("%s: %d/%d successful", variant, sum(r.success for r in records), len(records))


@dataclass
class AttackRun:
    name: str
    path: Path
    config: RunConfig
    records: list[AttackRecord]
    adversarial: np.ndarray

    @property
    def variant(self) -> str:
        return self.config["variant"]


def load_run(path: str | Path) -> AttackRun:
    root = Path(path)
    values = parse_config_text((root / "config.resolved").read_text(encoding="utf-8"), str(root))
    config = RunConfig.resolve("attack", values)
    records = read_records(root / "results.jsonl")
    adversarial = read_tensor(root / "adversarial.nftd")
    if len(records) != len(adversarial):
        raise ContractError(f"{root}: {len(records)} records but {len(adversarial)} adversarial rows")
    return AttackRun(config["variant"], root, config, records, adversarial)


def _load_runs(paths) -> list[AttackRun]:
    runs = [load_run(p) for p in paths]
    seen: dict[str, int] = {}
    for run in runs:
        seen[run.name] = seen.get(run.name, 0) + 1
    for run in runs:
        if seen[run.name] > 1:
            run.name = f"{run.name}:{run.path.name}"
    return runs


def _successful(run: AttackRun) -> tuple[np.ndarray, np.ndarray]:
    """Row positions and input indices of successful attacks on correctly classified inputs."""
    rows = np.array([k for k, r in enumerate(run.records) if r.success and r.correct], dtype=np.int64)
    return rows, np.array([run.records[k].index for k in rows], dtype=np.int64)


# --------------------------------------------------------------------------
# detect / evaluate
# --------------------------------------------------------------------------

def cmd_detect(cfg: RunConfig, out: Path) -> None:
    _require(cfg, "data", "labels", "classifier", "attacks")
    clf: ToyClassifier = load_classifier(cfg["classifier"])
    data = read_tensor(cfg["data"])
    fit_data = read_tensor(cfg["fit_data"]) if cfg["fit_data"] else data
    fit_labels = _labels(cfg["fit_labels"] or cfg["labels"])
    if len(fit_data) != len(fit_labels):
        raise ContractError(f"{len(fit_data)} inputs but {len(fit_labels)} labels for the class Gaussians")
    stats = [fit_class_gaussians(clf, fit_data, fit_labels, layer, cfg["ridge"]) for layer in cfg["layers"]]
    flow = load_flow(cfg["flow"]) if cfg["flow"] else None

    detectors, shifts = [], {}
    for run in _load_runs(cfg["attacks"]):
        rows, idx = _successful(run)
        clean, adv = data[idx], run.adversarial[rows]
        noise = cfg["noise_std"] if cfg["noise_std"] >= 0 else run.config["epsilon"] / 2.0
        seed = derived_seed(cfg.seed, "detect")
        dataset = build_detection_dataset(clf, stats, clean, adv, noise, clf.bounds, seed,
                                          cfg["train_fraction"])
        model = train_detector(dataset, seed=seed)
        metrics = evaluate_detector(model, dataset)
        detectors.append(detector_report(run.name, model, metrics, dataset, cfg.seed))
        logger.info("%s: detector AUROC %.4f accuracy %.4f", run.name, metrics.auroc, metrics.accuracy)
        if flow is not None and len(idx):
            shifts[run.name] = latent_shift(flow, clean, adv, cfg["bins"]).to_dict()
    write_json(out / "detect_report.json", {"detectors": detectors, "latent_shift": shifts})


def _lemma_table(flow: FlowModel, data: np.ndarray, cfg: RunConfig) -> list[dict[str, Any]]:
    rng = cfg.rng("eval")
    rows = []
    for point in range(min(cfg["lemma_points"], len(data))):
        direction = rng.standard_normal(flow.dim)
        direction /= np.linalg.norm(direction)
        try:
            table = lemma1_check(flow, data[point], direction, cfg["lemma_scales"])
        except ConditioningError as exc:
            logger.warning("first-order check skipped for input %d: %s", point, exc)
            rows.append({"point": point, "error": str(exc)})
            continue
        for row in table.to_dict("records"):
            rows.append({"point": point, **row})
    return rows


def _covariance(runs: list[AttackRun], data: np.ndarray, cfg: RunConfig) -> dict[str, Any]:
    flow_run = next((r for r in runs if r.variant in FLOW_VARIANTS), None)
    nat_run = next((r for r in runs if r.variant == "nattack"), None)
    if flow_run is None or nat_run is None:
        return {"status": "needs a flow-based run and an nattack run"}
    f_rows, f_idx = _successful(flow_run)
    n_rows, n_idx = _successful(nat_run)
    common = np.intersect1d(f_idx, n_idx)
    if len(common) < cfg["covariance_min"]:
        return {"status": f"only {len(common)} mutually successful perturbations", "n": int(len(common))}
    f_pos = dict(zip(f_idx.tolist(), f_rows.tolist()))
    n_pos = dict(zip(n_idx.tolist(), n_rows.tolist()))
    pick_f = np.array([f_pos[i] for i in common.tolist()], dtype=np.int64)
    pick_n = np.array([n_pos[i] for i in common.tolist()], dtype=np.int64)
    clean = data[common].astype(np.float64)
    summary = perturbation_covariance(flow_run.adversarial[pick_f] - clean, nat_run.adversarial[pick_n] - clean,
                                      cfg["covariance_top"], cfg["covariance_min"])
    return {"status": "ok", "n": int(len(common)), "flow_variant": flow_run.name, **summary.to_dict()}


def cmd_evaluate(cfg: RunConfig, out: Path) -> None:
    _require(cfg, "attacks")
    runs = _load_runs(cfg["attacks"])
    results = {run.name: run.records for run in runs}
    report = query_stats(results)
    curve = success_curve(results, cfg["budgets"])
    document: dict[str, Any] = {**report.to_dict(), "success_curve": {
        str(b): row for b, row in curve.to_dict("index").items()}}
    text = [report.to_text(), "\nsuccess rate (%) within budget\n", curve.to_string(), "\n"]
    curve.to_csv(out / "success_curve.csv")

    if cfg["targets"]:
        targets = {Path(p).parent.name or Path(p).stem: load_classifier(p).probs for p in cfg["targets"]}
        sources = []
        for run in runs:
            labels = _labels(run.config["labels"])
            idx = np.array([r.index for r in run.records], dtype=np.int64)
            success = np.array([r.success and r.correct for r in run.records])
            source = Path(run.config["classifier"]).parent.name or run.name
            sources.append(TransferSource(f"{source}:{run.name}", run.adversarial, labels[idx], success))
        matrix = transferability(sources, targets)
        matrix.to_csv(out / "transfer.csv")
        document["transfer"] = matrix.to_dict("index")
        text += ["\ntransfer success rate (%), rows = source, columns = target\n", matrix.to_string(), "\n"]

    if cfg["data"]:
        data = read_tensor(cfg["data"])
        if cfg["flow"]:
            flow = load_flow(cfg["flow"])
            lemma = _lemma_table(flow, data.reshape(len(data), -1), cfg)
            document["lemma1"] = lemma
            text += ["\nfirst-order check\n", pd.DataFrame(lemma).to_string(index=False), "\n"]
        document["covariance"] = _covariance(runs, data, cfg)

    write_json(out / "evaluation.json", document)
    (out / "evaluation.txt").write_text("".join(text), encoding="utf-8")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-flow": cmd_train_flow,
    "train-classifier": cmd_train_classifier,
    "attack": cmd_attack,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowattack", description="Flow-based black-box adversarial attacks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, keys in COMMAND_KEYS.items():
        p = sub.add_parser(command, help=DESCRIPTIONS[command], description=DESCRIPTIONS[command])
        p.add_argument("--config", help="flat 'key = value' configuration file")
        p.add_argument("--out", required=True, help="fresh output directory")
        p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        group = p.add_argument_group("configuration keys")
        for key in keys:
            group.add_argument(key.flag, dest=f"key_{key.name}", metavar=key.kind.upper(),
                               help=f"{key.name}: {key.help} (default: {format_value(key.default) or 'unset'})")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr)
    overrides = {k.name: getattr(args, f"key_{k.name}") for k in COMMAND_KEYS[args.command]
                 if getattr(args, f"key_{k.name}") is not None}
    try:
        cfg = RunConfig.from_file(args.command, args.config, overrides)
        out = _fresh_dir(args.out)
        (out / "config.resolved").write_text(cfg.to_text(), encoding="utf-8")
        COMMANDS[args.command](cfg, out)
    except (FlowAttackError, FileNotFoundError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return exit_code_for(exc)
    except Exception as exc:
        logger.exception("%s failed unexpectedly: %s", args.command, exc)
        return exit_code_for(exc)
    return EXIT_OK
