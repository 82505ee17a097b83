"""Command-line entry point: ``advmi gen-data | train | eval | bound-track``.

Exit codes: 0 success, 2 usage, 3 numeric failure, 4 artifact mismatch,
5 data mismatch.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__, checkpoint, tasks, trainer
from .infometrics import JointTable
from .seqmodel import Vocab

log = logging.getLogger("advmi")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_ARTIFACT, EXIT_DATA = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class RunManifest:
    config: dict
    dataset: str
    dataset_sha256: str
    seed: int
    artifacts: dict = field(default_factory=dict)
    joint: str | None = None
    valid: str | None = None
    tool_version: str = __version__

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _guard(paths, overwrite: bool):
    clash = [str(p) for p in paths if Path(p).exists()]
    if clash and not overwrite:
        raise CliError(f"refusing to overwrite {', '.join(clash)} (pass --overwrite)", EXIT_USAGE)


# -- joint-table sidecar -------------------------------------------------------

def write_joint(joint: JointTable, vocab: Vocab, path: str | Path) -> None:
    rows = [[vocab.decode(s), vocab.decode(t), p] for s, t, p in joint.rows]
    Path(path).write_text(json.dumps({"rows": rows}) + "\n", encoding="utf-8")


def read_joint(path: str | Path, vocab: Vocab) -> JointTable:
    rows = json.loads(Path(path).read_text(encoding="utf-8"))["rows"]
    return JointTable((vocab.encode(s, strict=True), vocab.encode(t, strict=True), p)
                      for s, t, p in rows)


def _load_data(path, joint_path=None, vocab: Vocab | None = None) -> tasks.Dataset:
    try:
        ds = tasks.load_corpus(path, vocab=vocab)
    except FileNotFoundError:
        raise CliError(f"no such data file: {path}", EXIT_USAGE) from None
    except tasks.CorpusError as exc:
        code = EXIT_ARTIFACT if vocab is not None and "not in vocabulary" in str(exc) else EXIT_DATA
        raise CliError(f"{path}: {exc}", code) from None
    if joint_path:
        try:
            ds.joint = read_joint(joint_path, ds.vocab)
        except (KeyError, ValueError) as exc:
            raise CliError(f"{joint_path}: joint table does not match the corpus: {exc}",
                           EXIT_DATA) from None
    return ds


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    try:
        spec = tasks.TaskSpec(args.kind, args.vocab_size, args.min_len, args.max_len,
                              args.mixture_p, args.n_sources, args.seed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    outs = [args.out] + ([args.joint] if args.joint else [])
    _guard(outs, args.overwrite)
    ds = tasks.generate(spec, args.n_pairs)
    tasks.write_corpus(ds, args.out)
    if args.joint:
        if ds.joint is None:
            raise CliError(f"task {spec.kind} is too large to enumerate a joint table", EXIT_USAGE)
        write_joint(ds.joint, ds.vocab, args.joint)
    print(f"wrote {len(ds)} pairs ({spec.kind}, {len(ds.vocab)} ids) to {args.out} "
          f"sha256={sha256_file(args.out)}")
    return EXIT_OK


def _read_config(path) -> trainer.TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CliError(f"no such config file: {path}", EXIT_USAGE) from None
    try:
        return trainer.parse_config(text)
    except ValueError as exc:
        raise CliError(f"{path}: {exc}", EXIT_USAGE) from None


def run_training(config: trainer.TrainConfig, data_path, out_dir, joint_path=None, valid_path=None,
                 overwrite=False) -> RunManifest:
    out = Path(out_dir)
    names = {"checkpoint": "checkpoint.bin", "metrics": "metrics.csv", "bounds": "bounds.csv",
             "diagnostics": "diagnostics.jsonl", "manifest": "manifest.json"}
    _guard([out / n for n in names.values()], overwrite)
    out.mkdir(parents=True, exist_ok=True)
    train_ds = _load_data(data_path, joint_path)
    eval_ds = _load_data(valid_path, joint_path, train_ds.vocab) if valid_path else train_ds
    manifest = RunManifest(config.to_dict(), str(Path(data_path).resolve()), sha256_file(data_path),
                           config.seed, {k: str(out / v) for k, v in names.items()},
                           str(Path(joint_path).resolve()) if joint_path else None,
                           str(Path(valid_path).resolve()) if valid_path else None)
    state = trainer.init_state(train_ds.vocab, config)
    try:
        trainer.pretrain_state(state, train_ds, config)
        result = trainer.train(state, train_ds, config, eval_ds)
    except trainer.TrainingDiverged as exc:
        good = exc.state if isinstance(exc.state, trainer.TrainState) else None
        if good is not None:
            trainer.save_state(good, out / "last_good.bin", config)
        raise CliError(f"training diverged: {exc}", EXIT_NUMERIC) from None
    trainer.save_state(result.state, out / names["checkpoint"], config)
    (out / names["metrics"]).write_text(trainer.rows_to_csv(result.metrics, trainer.METRIC_COLUMNS))
    (out / names["bounds"]).write_text(trainer.rows_to_csv(result.bounds, trainer.BOUND_COLUMNS))
    trainer.write_jsonl(result.diagnostics, out / names["diagnostics"])
    (out / names["manifest"]).write_text(manifest.to_json())
    return manifest


def cmd_train(args) -> int:
    if args.from_manifest:
        try:
            manifest = RunManifest.from_json(Path(args.from_manifest).read_text(encoding="utf-8"))
        except (FileNotFoundError, json.JSONDecodeError, TypeError) as exc:
            raise CliError(f"cannot read manifest {args.from_manifest}: {exc}", EXIT_USAGE) from None
        if sha256_file(manifest.dataset) != manifest.dataset_sha256:
            raise CliError("dataset bytes do not match the manifest fingerprint", EXIT_DATA)
        config = trainer.TrainConfig(**manifest.config)
        data, joint, valid = manifest.dataset, manifest.joint, manifest.valid
    else:
        if not args.config or not args.data:
            raise CliError("train needs --config and --data (or --from-manifest)", EXIT_USAGE)
        config = _read_config(args.config)
        data, joint, valid = args.data, args.joint, args.valid
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    if os.environ.get("AMI_SEED"):
        try:
            overrides["seed"] = int(os.environ["AMI_SEED"])
        except ValueError:
            raise CliError("AMI_SEED must be an integer", EXIT_USAGE) from None
    try:
        config = config.replace(**overrides)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    run_training(config, data, args.out, joint, valid, args.overwrite)
    print(f"trained mode={config.mode} seed={config.seed}; artifacts in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _guard([args.out], args.overwrite)
    try:
        state, config = trainer.load_state(args.checkpoint)
    except FileNotFoundError:
        raise CliError(f"no such checkpoint: {args.checkpoint}", EXIT_USAGE) from None
    except checkpoint.CheckpointError as exc:
        raise CliError(f"{args.checkpoint}: {exc}", EXIT_ARTIFACT) from None
    ds = _load_data(args.data, args.joint, state.vocab)
    config = config or trainer.TrainConfig(hidden=state.forward.config.hidden,
                                           embed=state.forward.config.embed,
                                           max_len=state.forward.config.max_len)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    res = trainer.evaluate(state, ds, config)
    report = {"tool_version": __version__, "checkpoint": str(args.checkpoint), **res.as_dict()}
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(res.metrics.as_dict(), sort_keys=True))
    return EXIT_OK


def _read_bounds(path) -> dict[int, float]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise CliError(f"no such file: {path}", EXIT_USAGE) from None
    try:
        return {int(r["step"]): float(r["bound"]) for r in rows}
    except (KeyError, ValueError, TypeError) as exc:
        raise CliError(f"{path}: not a bounds/metrics CSV ({exc})", EXIT_DATA) from None


def bound_track(ami: dict[int, float], mmi: dict[int, float]) -> list[dict]:
    if sorted(ami) != sorted(mmi):
        raise CliError("step grids differ between the two runs", EXIT_DATA)
    return [{"step": s, "bound_ami": ami[s], "bound_mmi": mmi[s], "gap": ami[s] - mmi[s]}
            for s in sorted(ami)]


def cmd_bound_track(args) -> int:
    _guard([args.out], args.overwrite)
    rows = bound_track(_read_bounds(args.ami), _read_bounds(args.mmi))
    Path(args.out).write_text(trainer.rows_to_csv(rows, ("step", "bound_ami", "bound_mmi", "gap")))
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advmi", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic TSV corpus")
    g.add_argument("--kind", required=True, help=f"one of {', '.join(tasks.KINDS)}")
    g.add_argument("--vocab-size", type=int, default=16)
    g.add_argument("--min-len", type=int, default=1)
    g.add_argument("--max-len", type=int, default=8)
    g.add_argument("--mixture-p", type=float, default=0.5)
    g.add_argument("--n-sources", type=int, default=8)
    g.add_argument("--n-pairs", type=int, default=5000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--joint", help="also write the exact joint table (JSON)")
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="pretrain and run mle/mmi/ami training")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--mode", choices=trainer.MODES)
    t.add_argument("--data")
    t.add_argument("--joint", help="joint-table sidecar for exact MI reporting")
    t.add_argument("--valid", help="evaluation split (defaults to the training data)")
    t.add_argument("--from-manifest", help="rerun exactly from a manifest.json")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--overwrite", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--joint")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--overwrite", action="store_true")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bound-track", help="merge AMI and MMI bound series")
    b.add_argument("--ami", required=True)
    b.add_argument("--mmi", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--overwrite", action="store_true")
    b.set_defaults(func=cmd_bound_track)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"advmi: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
