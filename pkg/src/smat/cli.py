"""Command-line interface.

Subcommands cover the full experiment pipeline: materialize a synthetic
corpus, train a teacher, train students under a chosen explanation mode
over several seeds, evaluate simulability or plausibility, export
explanations, and rank methods from tournament files.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace
from collections.abc import Sequence

import numpy as np

from . import data as dio
from . import metrics, training
from .explainers import (
    STATIC_EXPLAINERS,
    ExplainerParams,
    Saliency,
    compute_static_saliency,
    explain_parameterized,
)
from .autodiff import Tensor
from .model import MiniTransformer, ModelConfig


class ConfigurationError(Exception):
    """A problem with a config file or derived configuration (exit 2)."""


# ---------------------------------------------------------------------------
# config plumbing


def _load_config(path: str) -> dict:
    try:
        return dio.load_config(path)
    except dio.DataError as err:
        raise ConfigurationError(str(err)) from err


def _section(cfg: dict, name: str, required: bool = True) -> dict:
    part = cfg.get(name)
    if part is None:
        if required:
            raise ConfigurationError(f"config is missing the {name!r} section")
        return {}
    if not isinstance(part, dict):
        raise ConfigurationError(f"config section {name!r} must be an object")
    return part


def _model_config(section: dict, vocab_size: int, where: str) -> ModelConfig:
    body = dict(section)
    declared = body.pop("vocab_size", None)
    if declared is not None and int(declared) < vocab_size:
        raise ConfigurationError(
            f"{where}.vocab_size {declared} is smaller than the data vocabulary {vocab_size}"
        )
    try:
        return ModelConfig(vocab_size=int(declared) if declared else vocab_size, **body)
    except (TypeError, ValueError) as err:
        raise ConfigurationError(f"bad {where} section: {err}") from err


def _train_config(section: dict, **overrides) -> training.TrainConfig:
    body = {**section, **overrides}
    try:
        return training.TrainConfig.from_dict(body)
    except (TypeError, ValueError) as err:
        raise ConfigurationError(f"bad train section: {err}") from err


def _synthetic_spec(section: dict) -> dio.SyntheticSpec:
    try:
        return dio.SyntheticSpec.from_dict(section)
    except (TypeError, dio.DataError) as err:
        raise ConfigurationError(f"bad synthetic section: {err}") from err


def _resolve_dataset(cfg: dict, config_dir: str) -> dio.Dataset:
    data_cfg = _section(cfg, "data")
    path = data_cfg.get("path")
    if path:
        full = path if os.path.isabs(path) else os.path.join(config_dir, path)
        return dio.load_tsv(full)
    if "synthetic" in data_cfg:
        spec = _synthetic_spec(data_cfg["synthetic"])
        n = int(data_cfg.get("n", 1000))
        return dio.generate_synthetic(spec, n)
    raise ConfigurationError("data section needs either 'path' or 'synthetic'")


def _resolve_splits(cfg: dict, dataset: dio.Dataset) -> dio.Splits:
    data_cfg = _section(cfg, "data")
    ratios = data_cfg.get("ratios", list(dio.SPLIT_RATIOS))
    split_seed = int(data_cfg.get("split_seed", 0))
    try:
        return dio.split_dataset(dataset, ratios=ratios, seed=split_seed)
    except dio.DataError as err:
        raise ConfigurationError(str(err)) from err


def _config_sha256(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_data(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    data_cfg = _section(cfg, "data")
    if "synthetic" not in data_cfg:
        raise ConfigurationError("make-data needs a data.synthetic section")
    spec = _synthetic_spec(data_cfg["synthetic"])
    n = int(data_cfg.get("n", 1000))
    dataset = dio.generate_synthetic(spec, n)
    dio.save_tsv(dataset, args.out)
    print(f"wrote {len(dataset)} examples to {args.out}")
    return 0


def cmd_train_teacher(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    config_dir = os.path.dirname(os.path.abspath(args.config))
    dataset = _resolve_dataset(cfg, config_dir)
    data_cfg = _section(cfg, "data")
    vocab = dio.build_vocab(dataset.examples, min_freq=int(data_cfg.get("min_freq", 1)))
    dio.attach_token_ids(dataset, vocab)
    splits = _resolve_splits(cfg, dataset)

    model_cfg = _model_config(_section(cfg, "model"), len(vocab), "model")
    if model_cfg.task != dataset.task:
        raise ConfigurationError(
            f"model task {model_cfg.task!r} does not match data task {dataset.task!r}"
        )
    tt = _section(cfg, "teacher_train", required=False)
    teacher = MiniTransformer(model_cfg, seed=int(tt.get("seed", 0)))
    training.train_supervised(
        teacher,
        splits.train,
        lr=float(tt.get("lr", 0.1)),
        momentum=float(tt.get("momentum", 0.9)),
        steps=int(tt.get("steps", 500)),
        batch_size=int(tt.get("batch_size", 32)),
        seed=int(tt.get("seed", 0)),
    )
    if dataset.task == "classification":
        train_acc = training.gold_accuracy(teacher, splits.train)
        test_acc = training.gold_accuracy(teacher, splits.test) if splits.test else float("nan")
        print(f"teacher: train_acc={train_acc:.4f} test_acc={test_acc:.4f}")
    dio.save_model(teacher, args.out, extra_echo={"vocab": vocab, "task": dataset.task})
    print(f"saved teacher to {args.out}")
    return 0


def _load_teacher(path: str) -> tuple[MiniTransformer, dict, dict]:
    teacher, echo = dio.load_model(path)
    vocab = echo.get("vocab")
    if not isinstance(vocab, dict):
        raise dio.CheckpointError(f"{path}: teacher sidecar has no vocabulary")
    return teacher, echo, vocab


def cmd_train_student(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    config_dir = os.path.dirname(os.path.abspath(args.config))
    teacher, _, vocab = _load_teacher(args.teacher)

    dataset = _resolve_dataset(cfg, config_dir)
    dio.attach_token_ids(dataset, vocab)
    splits = _resolve_splits(cfg, dataset)
    data_cfg = _section(cfg, "data")
    limit = data_cfg.get("student_train_size")
    student_pool = splits.train[: int(limit)] if limit else splits.train

    base = _train_config(_section(cfg, "train", required=False), mode=args.mode)
    student_cfg = _model_config(_section(cfg, "student_model"), len(vocab), "student_model")
    if args.seeds < 1:
        raise ConfigurationError("--seeds must be >= 1")

    os.makedirs(args.out, exist_ok=True)
    runs = []
    sims: list[float] = []
    for i in range(args.seeds):
        seed = base.seed + i
        run_cfg = replace(base, seed=seed)
        result = training.train(
            run_cfg,
            teacher,
            dio.Splits(train=student_pool, dev=splits.dev, test=splits.test, task=splits.task),
            student_cfg,
        )
        run_dir = os.path.join(args.out, f"seed_{seed}")
        os.makedirs(run_dir, exist_ok=True)
        student_path = os.path.join(run_dir, "student.smat")
        dio.save_model(result.student, student_path, extra_echo={"seed": seed})
        phi_path = None
        if run_cfg.mode_kind() == "smat":
            phi_path = os.path.join(run_dir, "phi_t.smat")
            dio.save_checkpoint(
                {"phi_t": result.phi_t.data},
                phi_path,
                config_echo={
                    "kind": "phi",
                    "normalize": run_cfg.normalize,
                    "scope": run_cfg.explainer_scope(),
                },
            )
        tctx = training.TeacherContext(teacher, run_cfg)
        test_sim = training.simulability(result.student, tctx, splits.test)
        dev_sim = training.simulability(result.student, tctx, splits.dev)
        active = training.count_active_heads(result.phi_t, run_cfg.normalize)
        run_log_path = os.path.join(run_dir, "run.json")
        dio._atomic_write_text(
            run_log_path,
            json.dumps(
                {
                    "seed": seed,
                    "log": [rec.to_dict() for rec in result.log],
                    "test_simulability": test_sim,
                    "dev_simulability": dev_sim,
                    "active_heads": active,
                },
                sort_keys=True,
            )
            + "\n",
        )
        runs.append(
            {
                "seed": seed,
                "dir": f"seed_{seed}",
                "student": os.path.join(f"seed_{seed}", "student.smat"),
                "phi_t": os.path.join(f"seed_{seed}", "phi_t.smat") if phi_path else None,
                "run_log": os.path.join(f"seed_{seed}", "run.json"),
                "test_simulability": test_sim,
                "dev_simulability": dev_sim,
                "active_heads": active,
            }
        )
        sims.append(test_sim)
        print(f"seed={seed} test_simulability={test_sim:.4f} active_heads={active}")

    agg = metrics.aggregate_median_iqr(sims)
    summary = {
        "mode": args.mode,
        "normalize": base.normalize,
        "scope": base.explainer_scope(),
        "config_sha256": _config_sha256(args.config),
        "teacher": os.path.abspath(args.teacher),
        "base_seed": base.seed,
        "seeds": [base.seed + i for i in range(args.seeds)],
        "task": splits.task,
        "runs": runs,
        "test_simulability": agg.to_dict(),
    }
    dio._atomic_write_text(
        os.path.join(args.out, "summary.json"), json.dumps(summary, sort_keys=True) + "\n"
    )
    print(
        f"mode={args.mode} median={agg.median:.4f} "
        f"iqr=[{agg.iqr_low:.4f}, {agg.iqr_high:.4f}] -> {args.out}"
    )
    return 0


def _load_summary(students_dir: str) -> dict:
    path = os.path.join(students_dir, "summary.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no summary.json in {students_dir}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def cmd_evaluate(args: argparse.Namespace) -> int:
    teacher, _, vocab = _load_teacher(args.teacher)
    dataset = dio.load_tsv(args.data)
    dio.attach_token_ids(dataset, vocab)
    summary = _load_summary(args.students)
    mode = summary["mode"]

    if args.metric == "sim":
        base_cfg = training.TrainConfig(mode=mode)
        tctx = training.TeacherContext(teacher, base_cfg)
        values = []
        for run in summary["runs"]:
            student, _ = dio.load_model(os.path.join(args.students, run["student"]))
            sim = training.simulability(student, tctx, dataset.examples)
            values.append(sim)
            print(f"seed={run['seed']} sim={sim:.4f}")
        agg = metrics.aggregate_median_iqr(values)
        print(f"aggregate median={agg.median:.4f} iqr=[{agg.iqr_low:.4f}, {agg.iqr_high:.4f}]")
        return 0

    # plausibility AUC against gold rationales
    if not any(ex.rationale is not None for ex in dataset.examples):
        raise ValueError(
            "plausibility AUC requires rationale masks in the data file "
            "(third TSV column of 0/1 flags)"
        )
    with_masks = [ex for ex in dataset.examples if ex.rationale is not None]
    values = []
    for run in summary["runs"]:
        saliencies = _teacher_saliencies(teacher, summary, run, args.students, with_masks)
        pairs = [(sal.scores, ex.rationale) for sal, ex in zip(saliencies, with_masks)]
        auc, used, skipped = metrics.corpus_auc(pairs)
        values.append(auc)
        print(f"seed={run['seed']} auc={auc:.4f} used={used} skipped={skipped}")
    agg = metrics.aggregate_median_iqr(values)
    print(f"aggregate median={agg.median:.4f} iqr=[{agg.iqr_low:.4f}, {agg.iqr_high:.4f}]")
    return 0


def _teacher_saliencies(
    teacher: MiniTransformer,
    summary: dict,
    run: dict,
    students_dir: str,
    examples: Sequence[dio.Example],
) -> list[Saliency]:
    mode = summary["mode"]
    if mode == "smat":
        phi_values = dio.load_checkpoint(os.path.join(students_dir, run["phi_t"]))["phi_t"]
        params = ExplainerParams(
            phi=Tensor(phi_values),
            normalize=summary.get("normalize", "sparsemax"),
            scope=summary.get("scope", "all"),
        )
        return [explain_parameterized(teacher, ex.token_ids, params) for ex in examples]
    if mode.startswith("static:"):
        name = mode.split(":", 1)[1]
        return [compute_static_saliency(teacher, ex.token_ids, name) for ex in examples]
    raise ValueError(f"mode {mode!r} trains without a teacher explainer; nothing to score")


def cmd_explain(args: argparse.Namespace) -> int:
    model, echo = dio.load_model(args.model)
    dataset = dio.load_tsv(args.data)
    vocab = echo.get("vocab")
    if not isinstance(vocab, dict):
        raise dio.CheckpointError(f"{args.model}: sidecar has no vocabulary")
    dio.attach_token_ids(dataset, vocab)

    params = None
    if args.explainer == "parameterized":
        if not args.phi:
            raise ConfigurationError("--explainer parameterized requires --phi")
        phi_echo = dio.load_config_echo(args.phi)
        phi_values = dio.load_checkpoint(args.phi)["phi_t"]
        params = ExplainerParams(
            phi=Tensor(phi_values),
            normalize=phi_echo.get("normalize", "sparsemax"),
            scope=phi_echo.get("scope", "all"),
        )

    records = []
    for ex in dataset.examples:
        n = len(ex.token_ids)
        if params is not None:
            sal = explain_parameterized(model, ex.token_ids, params)
        else:
            sal = compute_static_saliency(model, ex.token_ids, args.explainer)
        record = {
            "tokens": ex.tokens[:n],
            "scores": [float(s) for s in sal.scores],
            "prediction": model.predict(ex.token_ids),
        }
        if ex.label is not None:
            record["gold_label"] = ex.label
        if ex.score is not None:
            record["gold_score"] = ex.score
        if ex.rationale is not None:
            record["gold_mask"] = list(ex.rationale)
        records.append(record)

    out = args.out or ("explanations.jsonl" if args.format == "jsonl" else "report.html")
    if args.format == "jsonl":
        dio.export_explanations(records, out)
    else:
        dio.render_html_report(records, out, title=f"{args.explainer} explanations")
    print(f"wrote {len(records)} explanations to {out}")
    return 0


def cmd_trueskill(args: argparse.Namespace) -> int:
    with open(args.rankings, "r", encoding="utf-8") as fh:
        lines = [line.strip() for line in fh if line.strip()]
    if not lines:
        raise ValueError(f"{args.rankings}: no rankings")
    rankings: list[list[object]] = []
    names: list[str] = []
    for line in lines:
        groups: list[object] = []
        for part in line.split(","):
            tied = [p.strip() for p in part.split("=") if p.strip()]
            if not tied:
                raise ValueError(f"{args.rankings}: malformed ranking line {line!r}")
            for name in tied:
                if name not in names:
                    names.append(name)
            groups.append(tied[0] if len(tied) == 1 else tied)
        rankings.append(groups)
    ratings = metrics.fresh_ratings(names)
    for ranking in rankings:
        ratings = metrics.trueskill_update(ratings, ranking)
    ranks = metrics.rank_with_confidence(ratings)
    for name in sorted(ratings, key=lambda n: -ratings[n].mu):
        r = ratings[name]
        lo, hi = r.interval()
        print(
            f"{name}: mu={r.mu:.3f} sigma={r.sigma:.3f} "
            f"interval=[{lo:.3f}, {hi:.3f}] rank={metrics.format_rank(ranks[name])}"
        )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smat",
        description="Train and evaluate students scaffolded by teacher explanations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="materialize the synthetic corpus to TSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train-teacher", help="train the teacher on gold labels")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="train students under an explanation mode")
    p.add_argument("--config", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--mode", required=True, help="none, static:<name>, or smat")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("evaluate", help="score trained students")
    p.add_argument("--students", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metric", required=True, choices=["sim", "auc"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("explain", help="export explanations for a model")
    p.add_argument("--model", required=True)
    p.add_argument("--phi", default=None)
    p.add_argument(
        "--explainer",
        required=True,
        choices=list(STATIC_EXPLAINERS) + ["parameterized"],
    )
    p.add_argument("--data", required=True)
    p.add_argument("--format", required=True, choices=["jsonl", "html"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("trueskill", help="rank methods from tournament rankings")
    p.add_argument("--rankings", required=True)
    p.set_defaults(func=cmd_trueskill)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigurationError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
