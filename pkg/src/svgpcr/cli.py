"""Command-line interface: simulate, train, predict, evaluate, inspect-annotators."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import data_io
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, SVGPCRError
from .metrics import metrics_table
from .simulator import controlled_annotators, generate_annotations, make_toy_dataset
from .trainer import TrainConfig, Trainer, initialize_model, predict_proba, refresh_all_responsibilities

log = logging.getLogger("svgpcr")

# CLI flag -> TrainConfig field, for command-line overrides
OVERRIDES = {
    "epochs": int,
    "minibatch_size": int,
    "learning_rate": float,
    "num_inducing": int,
    "quadrature_points": int,
    "jitter": float,
    "eval_every": int,
    "inducing_init": str,
    "lengthscale_init": str,
    "prior_diagonal": float,
}


class Outputs:
    """Tracks files written by a command so they can be removed if it fails."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / name
        self.written.append(p)
        return p

    def discard(self):
        for p in self.written:
            p.unlink(missing_ok=True)


def load_config(path, args) -> TrainConfig:
    values = {}
    if path:
        with open(path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a mapping of TrainConfig fields")
        values.update(loaded)
    for name in OVERRIDES:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    try:
        return TrainConfig.from_dict(values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def cmd_simulate(args, out: Outputs) -> int:
    specs = controlled_annotators()
    if args.coverage != 1.0:
        specs = [dataclasses.replace(s, coverage=args.coverage) for s in specs]
    X, y = make_toy_dataset(args.kind, args.num_instances, args.num_classes, seed=args.seed,
                            separation=args.separation)
    ann, mats = generate_annotations(y, specs, seed=args.seed + 1, num_classes=args.num_classes)
    data_io.save_features(X, out.path("features.csv"))
    data_io.save_annotations(ann, out.path("annotations.csv"))
    data_io.write_table(out.path("truth.csv"), ["instance_id", "label"], [[i, int(v)] for i, v in enumerate(y)])
    rows = [
        [a, i, j, data_io.fmt(R[i, j])]
        for a, R in enumerate(mats) for j in range(R.shape[1]) for i in range(R.shape[0])
    ]
    data_io.write_table(out.path("true_confusions.csv"), ["annotator_id", "label", "true_class", "probability"], rows)
    if args.test_size:
        Xt, yt = make_toy_dataset(args.kind, args.test_size, args.num_classes, seed=args.seed + 2,
                                  separation=args.separation)
        data_io.save_features(Xt, out.path("test_features.csv"))
        data_io.write_table(out.path("test_truth.csv"), ["instance_id", "label"],
                            [[i, int(v)] for i, v in enumerate(yt)])
    print(f"wrote {len(y)} instances, {ann.total_annotations()} annotations to {out.dir}")
    return 0


def cmd_train(args, out: Outputs) -> int:
    table = data_io.load_features(args.features)
    ann = data_io.bind_annotations(data_io.load_annotations(args.annotations, args.num_classes), table)
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        config = load_config(args.config, args) if (args.config or _has_overrides(args)) else ck.config
        config.validate(table.N)
        if ck.model.input_dim != table.D:
            raise DataError(f"checkpoint expects D={ck.model.input_dim}, features have D={table.D}")
        ck.config = config
        trainer = ck.restore_trainer(table.X, ann)
    else:
        config = load_config(args.config, args).validate(table.N)
        model = initialize_model(table.X, ann, config, args.num_classes)
        trainer = Trainer(model, table.X, ann, config)

    def report(tr, bd):
        log.info("step %d epoch %d elbo %.6g", tr.step, tr.epoch, float(bd.total))

    trainer.run(callback=report)
    refresh_all_responsibilities(trainer.model, table.X, ann)

    save_checkpoint(Checkpoint.from_trainer(trainer, instance_ids=table.ids), out.path("checkpoint.ckpt"))
    comments = [f"{k}={v}" for k, v in sorted(config.to_dict().items())]
    cols = list(trainer.log.COLUMNS)
    data_io.write_table(out.path("training_log.csv"), cols,
                        [[data_io.fmt(r[c]) for c in cols] for r in trainer.log.records], comments)
    data_io.write_table(out.path("timing.csv"), ["step", "elapsed_seconds"],
                        [[t["step"], data_io.fmt(t["elapsed"])] for t in trainer.log.timings])
    q = trainer.model.labels.q.numpy()
    _write_probs(out.path("label_posterior.csv"), table.ids, q, prefix="q")
    final = trainer.log.records[-1]["total"] if trainer.log.records else float("nan")
    print(f"trained {trainer.step} steps; final minibatch ELBO {final:.6g}; outputs in {out.dir}")
    return 0


def _has_overrides(args) -> bool:
    return any(getattr(args, n, None) is not None for n in OVERRIDES) or args.seed is not None


def _write_probs(path, ids, P, prefix="p"):
    header = ["instance_id"] + [f"{prefix}_{k}" for k in range(P.shape[1])]
    data_io.write_table(path, header, [[int(i), *(data_io.fmt(v) for v in row)] for i, row in zip(ids, P)])


def cmd_predict(args, out: Outputs) -> int:
    ck = load_checkpoint(args.checkpoint)
    table = data_io.load_features(args.features)
    if table.D != ck.model.input_dim:
        raise DataError(f"checkpoint was trained on D={ck.model.input_dim} features but {args.features} has D={table.D}")
    P = predict_proba(ck.model, table.X)
    _write_probs(out.path("predictions.csv"), table.ids, P)
    print(f"wrote predictions for {table.N} instances")
    return 0


def cmd_evaluate(args, out: Outputs) -> int:
    ids, P = data_io.load_probabilities(args.predictions)
    tids, y = data_io.load_truth(args.truth)
    lookup = dict(zip(tids.tolist(), y.tolist()))
    missing = [i for i in ids.tolist() if i not in lookup]
    if missing:
        raise DataError(f"no truth label for instance ids {missing[:5]}")
    truth = np.array([lookup[i] for i in ids.tolist()])
    if truth.max() >= P.shape[1]:
        raise DataError(f"truth contains class {int(truth.max())} unseen by a {P.shape[1]}-class model")
    rows = metrics_table(P, truth)
    header = ["class", "count", "accuracy", "likelihood", "mean_log_likelihood", "auc"]
    data_io.write_table(out.path("metrics.csv"), header,
                        [[data_io.fmt(r.get(h, float("nan"))) for h in header] for r in rows])
    g = rows[-1]
    print(f"accuracy {g['accuracy']:.4f}  likelihood {g['likelihood']:.4f}")
    return 0


def cmd_inspect(args, out: Outputs) -> int:
    ck = load_checkpoint(args.checkpoint)
    if ck.model.crowd is None:
        raise DataError("checkpoint has no annotator model")
    mean = ck.model.crowd.posterior_mean().numpy()
    var = ck.model.crowd.posterior_variance().numpy()
    ids = ck.annotator_ids if ck.annotator_ids is not None else np.arange(len(mean))
    K = mean.shape[1]
    rows = [
        [int(ids[a]), i, j, data_io.fmt(mean[a, i, j]), data_io.fmt(var[a, i, j])]
        for a in range(len(mean)) for j in range(K) for i in range(K)
    ]
    data_io.write_table(out.path("annotator_confusions.csv"),
                        ["annotator_id", "label", "true_class", "mean", "variance"], rows)
    print(f"{len(mean)} annotators; max posterior variance {var.max():.4g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="svgpcr", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic crowdsourced dataset")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--kind", choices=["gaussians", "two_moons"], default="gaussians")
    s.add_argument("--num-instances", type=int, default=2000)
    s.add_argument("--num-classes", type=int, default=5)
    s.add_argument("--separation", type=float, default=6.0)
    s.add_argument("--coverage", type=float, default=1.0)
    s.add_argument("--test-size", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="fit the model to features and annotations")
    t.add_argument("--features", required=True)
    t.add_argument("--annotations", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--num-classes", type=int)
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--out-dir", required=True)
    for name, typ in OVERRIDES.items():
        t.add_argument("--" + name.replace("_", "-"), type=typ, dest=name)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="class probabilities for new features")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--features", required=True)
    pr.add_argument("--out-dir", required=True)
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="metrics of predictions against true labels")
    e.add_argument("--predictions", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("inspect-annotators", help="posterior confusion matrices")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out-dir", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = Outputs(args.out_dir)
    try:
        return args.func(args, out)
    except (SVGPCRError, OSError, yaml.YAMLError) as exc:
        out.discard()
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
