"""``evogen`` command-line entry point.

Config precedence for every command: built-in defaults < ``--config`` JSON file <
explicit flags < ``--set key=value`` overrides. Each run writes its resolved
config next to its outputs. Exit codes: 0 success, 1 usage error, 2 data error,
3 verification failure. ``EVOGEN_SEED`` overrides the default seed (0).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

SEED_ENV = "EVOGEN_SEED"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("evogen")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


# -- config resolution ---------------------------------------------------------
def _coerce(value, default):
    if isinstance(value, str):
        if isinstance(default, bool):
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise UsageError(f"expected a boolean, got {value!r}")
        if isinstance(default, tuple):
            parts = [p for p in value.split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in parts)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if default is None:
            try:
                return json.loads(value)
            except json.JSONDecodeError:
                return value
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def resolve(cls, *layers: dict):
    """Build ``cls`` from its defaults updated by each layer in order."""
    proto = cls()
    names = {f.name for f in fields(cls)}
    values = {}
    for layer in layers:
        for k, v in (layer or {}).items():
            if k not in names:
                raise UsageError(f"unknown {cls.__name__} key {k!r}")
            try:
                values[k] = _coerce(v, getattr(proto, k))
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad value for {k}: {exc}") from None
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from None


def _load_config_file(path) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return data


def _parse_overrides(items) -> dict:
    out: dict = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        section, _, name = key.rpartition(".")
        out.setdefault(section, {})[name] = value
    return out


def _flags(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _section(file_cfg: dict, overrides: dict, name: str, flat: bool) -> tuple[dict, dict]:
    if name in file_cfg or not flat:
        fc = dict(file_cfg.get(name, {}))
    else:
        # a bare {"n_max": 64} file works for single-section commands
        fc = {k: v for k, v in file_cfg.items() if not isinstance(v, dict)}
    ov = dict(overrides.get(name, {}))
    if flat:
        ov.update(overrides.get("", {}))
    return fc, ov


def _write_run_config(path: Path, command: str, resolved: dict) -> None:
    path.write_text(json.dumps({"command": command, **resolved}, indent=1, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _add(p, flag, default, help_text, kind=None):
    dest = flag.lstrip("-").replace("-", "_")
    kind = kind or (str if isinstance(default, tuple) else type(default))
    p.add_argument(flag, dest=dest, type=kind, default=None, help=f"{help_text} (default: {_fmt(default)})")


# -- I/O helpers ---------------------------------------------------------------
def _read_msa(path):
    from .msa_io import MsaFormatError, read_a3m
    try:
        return read_a3m(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    except (MsaFormatError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _load_model(ckpt, preset=None):
    from .model import EvoGen
    from .tensor.checkpoint import CheckpointError
    expect = _model_config(preset) if preset else None
    try:
        return EvoGen.load(ckpt, expect)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {ckpt}: {exc}") from None
    except CheckpointError as exc:
        raise DataError(str(exc)) from None


def _model_config(choice, file_section=None, overrides=None):
    from .model import ModelConfig
    if choice in (None, "full"):
        base = ModelConfig.full()
    elif choice == "desk":
        base = ModelConfig.desk()
    elif choice == "toy":
        base = ModelConfig.toy()
    elif Path(choice).is_file():
        try:
            base = ModelConfig.from_dict(_load_config_file(choice))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid model config {choice}: {exc}") from None
    else:
        raise UsageError(f"model config must be full, desk, toy or a JSON file, got {choice!r}")
    layers = [base.to_dict(), file_section or {}, overrides or {}]
    return resolve(ModelConfig, *layers)


# -- commands ------------------------------------------------------------------
TRIM_FLAGS = ("n_max", "cov_min", "ident_max", "ident_min")


def cmd_trim(args, file_cfg, overrides):
    from .msa_io import save_a3m
    from .msa_trim import TrimConfig, trim
    fc, ov = _section(file_cfg, overrides, "trim", flat=True)
    cfg = resolve(TrimConfig, fc, _flags(args, TRIM_FLAGS), ov)
    out = trim(_read_msa(args.input), cfg)
    save_a3m(out, args.output)
    _write_run_config(Path(str(args.output) + ".config.json"), "trim",
                      {"trim": vars_of(cfg), "input": str(args.input)})
    print(f"kept {out.depth} rows")


def vars_of(cfg) -> dict:
    d = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def cmd_featurize(args, file_cfg, overrides):
    from .featurize import FeatureGrid, export_features, one_hot_features, tokenize
    msa = _read_msa(args.input)
    export_features(FeatureGrid(one_hot_features(tokenize(msa)), msa.query.symbols), args.output)
    print(f"wrote {msa.depth} x {msa.length} features")


SYNTH_FLAGS = ("n_families", "depth", "length", "conserved_fraction", "profile_sharpness",
               "mutation_rate", "gap_rate", "insertion_rate", "seed")


def cmd_synth(args, file_cfg, overrides):
    from .training import SyntheticFamilyConfig, save_corpus, synth_corpus
    fc, ov = _section(file_cfg, overrides, "synth", flat=True)
    flags = _flags(args, SYNTH_FLAGS)
    flags.setdefault("seed", default_seed())
    cfg = resolve(SyntheticFamilyConfig, fc, flags, ov)
    save_corpus(synth_corpus(cfg), args.output, cfg)
    print(f"wrote {cfg.n_families} families to {args.output}")


def _train_setup(args, file_cfg, overrides):
    from .training import TrainConfig, load_corpus
    mc = _model_config(args.model, file_cfg.get("model"), overrides.get("model"))
    flags = _flags(args, ("batch_size", "seed"))
    flags.setdefault("seed", default_seed())
    tc = resolve(TrainConfig, file_cfg.get("train"), flags, overrides.get("train"))
    try:
        msas, _ = load_corpus(args.corpus)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    except OSError as exc:
        raise DataError(f"cannot read corpus: {exc}") from None
    return mc, tc, msas


def _init_params(args, mc):
    from .model import init_params
    if args.init:
        model = _load_model(args.init)
        if model.cfg.digest() != mc.digest():
            raise DataError(f"checkpoint {args.init} was built under a different model config")
        return model.params
    return init_params(mc, seed=args.seed if args.seed is not None else default_seed())


def cmd_pretrain(args, file_cfg, overrides):
    from .training import pretrain_step, run_training
    mc, tc, msas = _train_setup(args, file_cfg, overrides)
    steps = args.steps if args.steps is not None else tc.total_pretrain_steps
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_run_config(out / "run_config.json", "pretrain",
                      {"model": mc.to_dict(), "train": tc.to_dict(), "steps": steps})
    params = _init_params(args, mc)
    run_training(msas, params, tc, mc, steps, pretrain_step, out_dir=out,
                 checkpoint_every=args.checkpoint_every or 0, tag="pretrain")
    print(f"trained {steps} steps; checkpoint at {out / 'pretrain_final.ckpt'}")


def cmd_finetune(args, file_cfg, overrides):
    from .protocols import synthetic_critic
    from .training import finetune_step, run_training
    if not args.init:
        raise UsageError("finetune needs --init CHECKPOINT")
    mc, tc, msas = _train_setup(args, file_cfg, overrides)
    steps = args.steps if args.steps is not None else tc.total_finetune_steps
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_run_config(out / "run_config.json", "finetune",
                      {"model": mc.to_dict(), "train": tc.to_dict(), "steps": steps, "critic": "synthetic-query"})
    params = _init_params(args, mc)
    items = [(m, synthetic_critic(m.token_array()[0])) for m in msas]
    run_training(items, params, tc, mc, steps, finetune_step, out_dir=out,
                 checkpoint_every=args.checkpoint_every or 0, tag="finetune")
    print(f"fine-tuned {steps} steps; checkpoint at {out / 'finetune_final.ckpt'}")


def _protocol_out(args) -> Path:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fname(*parts) -> str:
    return "_".join(str(p).replace(".", "p") for p in parts)


def cmd_calibrate(args, file_cfg, overrides):
    from .featurize import export_features
    from .msa_io import save_a3m
    from .protocols import CalibrationConfig, calibrate, write_manifest
    fc, ov = _section(file_cfg, overrides, "calibrate", flat=True)
    flags = _flags(args, ("r_ctx_values", "trials", "seed"))
    flags.setdefault("seed", default_seed())
    cfg = resolve(CalibrationConfig, fc, flags, ov)
    msa = _read_msa(args.input)
    model = _load_model(args.checkpoint, args.model)
    out = _protocol_out(args)
    records = []
    for tr in calibrate(msa, model, cfg):
        name = _fname("calibrated", tr.r_ctx, tr.trial)
        save_a3m(tr.msa, out / f"{name}.a3m")
        export_features(tr.features, out / f"{name}.feat")
        records.append({**tr.record(), "a3m": f"{name}.a3m", "features": f"{name}.feat"})
    write_manifest(records, out / "manifest.jsonl")
    _write_run_config(out / "run_config.json", "calibrate", {"calibrate": vars_of(cfg), "input": str(args.input),
                                                             "model": model.cfg.to_dict()})
    print(f"wrote {len(records)} calibrated trials")


def cmd_augment(args, file_cfg, overrides):
    from .featurize import export_features
    from .msa_io import save_a3m
    from .protocols import AugmentationConfig, augment, write_manifest
    fc, ov = _section(file_cfg, overrides, "augment", flat=True)
    flags = _flags(args, ("n_aug", "r_ctx_values", "trials", "mode", "seed"))
    flags.setdefault("seed", default_seed())
    cfg = resolve(AugmentationConfig, fc, flags, ov)
    msa = _read_msa(args.input)
    model = _load_model(args.checkpoint, args.model)
    out = _protocol_out(args)
    records = []
    for tr in augment(msa, model, cfg):
        name = _fname("augmented", tr.r_ctx, tr.trial)
        save_a3m(tr.msa, out / f"{name}.a3m")
        export_features(tr.features, out / f"{name}.feat")
        records.append({**tr.record(), "a3m": f"{name}.a3m", "features": f"{name}.feat"})
    write_manifest(records, out / "manifest.jsonl")
    _write_run_config(out / "run_config.json", "augment", {"augment": vars_of(cfg), "input": str(args.input),
                                                           "model": model.cfg.to_dict()})
    print(f"wrote {len(records)} augmented trials of depth {cfg.n_aug}")


def cmd_zeroshot(args, file_cfg, overrides):
    from .featurize import export_features
    from .msa_io import save_a3m
    from .protocols import ZeroShotConfig, write_manifest, zero_shot
    if bool(args.sequence) == bool(args.input):
        raise UsageError("give exactly one of --sequence or an input file")
    query = args.sequence if args.sequence else _read_msa(args.input).query.symbols
    fc, ov = _section(file_cfg, overrides, "zeroshot", flat=True)
    flags = _flags(args, ("n_aug_values", "trials", "mode", "seed"))
    flags.setdefault("seed", default_seed())
    cfg = resolve(ZeroShotConfig, fc, flags, ov)
    model = _load_model(args.checkpoint, args.model)
    out = _protocol_out(args)
    records = []
    try:
        trials = zero_shot(query, model, cfg)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    for tr in trials:
        name = _fname("zeroshot", tr.n_aug, tr.trial)
        save_a3m(tr.msa, out / f"{name}.a3m")
        export_features(tr.features, out / f"{name}.feat")
        records.append({**tr.record(), "protocol": "zeroshot", "a3m": f"{name}.a3m", "features": f"{name}.feat"})
    write_manifest(records, out / "manifest.jsonl")
    _write_run_config(out / "run_config.json", "zeroshot", {"zeroshot": vars_of(cfg), "query": query,
                                                            "model": model.cfg.to_dict()})
    print(f"wrote {len(records)} zero-shot trials")


def cmd_probe(args, file_cfg, overrides):
    from .protocols import ProbeConfig, probe, synthetic_critic, write_manifest
    fc, ov = _section(file_cfg, overrides, "probe", flat=True)
    flags = _flags(args, ("n_max", "n_sub_values", "r_ctx_values", "trials", "similarity_threshold",
                          "min_confidence", "seed"))
    flags.setdefault("seed", default_seed())
    cfg = resolve(ProbeConfig, fc, flags, ov)
    msa = _read_msa(args.input)
    model = _load_model(args.checkpoint, args.model)
    out = _protocol_out(args)
    try:
        res = probe(msa, model, synthetic_critic(msa.token_array()[0]), cfg)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    records = [{**tr.record(), "ensemble": lab} for tr, lab in zip(res.trials, res.labels)]
    write_manifest(records, out / "manifest.jsonl")
    (out / "ensembles.json").write_text(json.dumps(res.ensembles, indent=1, sort_keys=True) + "\n")
    _write_run_config(out / "run_config.json", "probe", {"probe": vars_of(cfg), "input": str(args.input),
                                                         "model": model.cfg.to_dict(), "critic": "synthetic-query"})
    print(f"{len(res.trials)} trials in {len(res.ensembles)} ensembles")


def cmd_gradcheck(args, file_cfg, overrides):
    from . import gradsuite
    results = gradsuite.run(seed=args.seed if args.seed is not None else default_seed(), tol=args.tol)
    failed = [r for r in results if not r.passed]
    for r in results:
        if args.verbose or not r.passed:
            print(r)
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_verify(args, file_cfg, overrides):
    try:
        import pytest
    except ImportError:
        raise UsageError("verify needs pytest (install the 'test' extra)") from None
    target = Path(args.tests)
    if not target.exists():
        raise UsageError(f"test directory {target} not found")
    argv = [str(target), "-q"] + (["-k", args.select] if args.select else [])
    code = pytest.main(argv)
    return EXIT_OK if code == 0 else EXIT_VERIFY


# -- parser ------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    from .protocols import AugmentationConfig, CalibrationConfig, ProbeConfig, ZeroShotConfig
    from .msa_trim import TrimConfig
    from .training import SyntheticFamilyConfig, TrainConfig

    parser = _Parser(prog="evogen", description="Conditional MSA generator: curation, training and inference.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON config file (default: none)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key; repeatable (default: none)")
        if seed:
            p.add_argument("--seed", type=int, default=None, help=f"random seed (default: ${SEED_ENV} or 0)")

    t = TrimConfig()
    p = sub.add_parser("trim", help="filter and cap an A3M alignment")
    p.add_argument("input")
    p.add_argument("output")
    _add(p, "--n-max", t.n_max, "depth cap")
    _add(p, "--cov-min", t.cov_min, "minimum coverage")
    _add(p, "--ident-max", t.ident_max, "maximum identity to the query and between kept rows")
    _add(p, "--ident-min", t.ident_min, "minimum identity to the query")
    common(p, seed=False)
    p.set_defaults(func=cmd_trim)

    p = sub.add_parser("featurize", help="one-hot feature container from an A3M")
    p.add_argument("input")
    p.add_argument("output")
    common(p, seed=False)
    p.set_defaults(func=cmd_featurize)

    s = SyntheticFamilyConfig()
    p = sub.add_parser("synth-data", help="write a synthetic MSA-family corpus")
    p.add_argument("output")
    _add(p, "--n-families", s.n_families, "number of families")
    _add(p, "--depth", s.depth, "rows per family")
    _add(p, "--length", s.length, "alignment length")
    _add(p, "--conserved-fraction", s.conserved_fraction, "fraction of conserved columns")
    _add(p, "--profile-sharpness", s.profile_sharpness, "sharpness of variable-column profiles")
    _add(p, "--mutation-rate", s.mutation_rate, "mutation rate at variable columns")
    _add(p, "--gap-rate", s.gap_rate, "gap rate at variable columns")
    _add(p, "--insertion-rate", s.insertion_rate, "insertion rate")
    common(p)
    p.set_defaults(func=cmd_synth)

    tc = TrainConfig()
    for name, func, steps in (("pretrain", cmd_pretrain, tc.total_pretrain_steps),
                              ("finetune", cmd_finetune, tc.total_finetune_steps)):
        p = sub.add_parser(name, help=f"{name} on a corpus directory or A3M file")
        p.add_argument("corpus")
        p.add_argument("output", help="output directory")
        p.add_argument("--model", default=None,
                       help="model config: full, desk, toy or a JSON file (default: full)")
        p.add_argument("--init", default=None, help="initial checkpoint" + (" (required, default: none)" if name == "finetune"
                                                                          else " (default: fresh init)"))
        p.add_argument("--steps", type=int, default=None, help=f"training steps (default: {steps})")
        _add(p, "--batch-size", tc.batch_size, "MSAs per step")
        p.add_argument("--checkpoint-every", type=int, default=None, help="checkpoint interval (default: 0, final only)")
        common(p)
        p.set_defaults(func=func)

    def inference(name, help_text, func, needs_input=True):
        p = sub.add_parser(name, help=help_text)
        if needs_input:
            p.add_argument("input", help="A3M file")
        p.add_argument("--checkpoint", required=True, help="model checkpoint (required)")
        p.add_argument("--model", default=None,
                       help="expected model config; refuse mismatching checkpoints (default: accept stored)")
        p.add_argument("--output", required=True, help="output directory (required)")
        p.set_defaults(func=func)
        return p

    c = CalibrationConfig()
    p = inference("calibrate", "depth-preserving MSA calibration", cmd_calibrate)
    _add(p, "--r-ctx", c.r_ctx_values, "context ratios")
    _add(p, "--trials", c.trials, "trials per ratio")
    common(p)

    a = AugmentationConfig()
    p = inference("augment", "few-shot MSA augmentation", cmd_augment)
    _add(p, "--n-aug", a.n_aug, "output depth")
    _add(p, "--r-ctx", a.r_ctx_values, "context ratios")
    _add(p, "--trials", a.trials, "trials per ratio")
    _add(p, "--mode", a.mode, "soft probabilities or hard samples")
    common(p)

    z = ZeroShotConfig()
    p = inference("zeroshot", "generate an MSA from the query alone", cmd_zeroshot, needs_input=False)
    p.add_argument("input", nargs="?", default=None, help="A3M/FASTA whose first record is the query (default: none)")
    p.add_argument("--sequence", default=None, help="raw query sequence (default: none)")
    _add(p, "--n-aug", z.n_aug_values, "output depths")
    _add(p, "--trials", z.trials, "trials per depth")
    _add(p, "--mode", z.mode, "soft probabilities or hard samples")
    common(p)

    pc = ProbeConfig()
    p = inference("probe", "probe alternative conformations by subsampled calibration", cmd_probe)
    _add(p, "--n-max", pc.n_max, "trimming cap for the pool")
    _add(p, "--n-sub", pc.n_sub_values, "subsample sizes")
    _add(p, "--r-ctx", pc.r_ctx_values, "context ratios")
    _add(p, "--trials", pc.trials, "trials per setting")
    _add(p, "--similarity-threshold", pc.similarity_threshold, "single-linkage similarity threshold")
    _add(p, "--min-confidence", pc.min_confidence, "confidence cut before clustering")
    common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--tol", type=float, default=1e-4, help="relative error bound (default: 0.0001)")
    p.add_argument("--seed", type=int, default=None, help=f"random seed (default: ${SEED_ENV} or 0)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("verify", help="run the property and acceptance test suite")
    p.add_argument("--tests", default="tests", help="test directory (default: tests)")
    p.add_argument("--select", default=None, help="pytest -k expression (default: all)")
    p.set_defaults(func=cmd_verify)
    return parser


# argparse dest names -> config field names where they differ
_DEST_ALIASES = {"r_ctx": "r_ctx_values", "n_sub": "n_sub_values"}


def _normalize(args) -> None:
    for src, dst in _DEST_ALIASES.items():
        if hasattr(args, src):
            val = getattr(args, src)
            if val is not None or not hasattr(args, dst):
                setattr(args, dst, val)
    if args.command == "zeroshot" and hasattr(args, "n_aug"):
        args.n_aug_values = args.n_aug


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _normalize(args)
    try:
        file_cfg = _load_config_file(getattr(args, "config", None))
        overrides = _parse_overrides(getattr(args, "set", None))
        code = args.func(args, file_cfg, overrides)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(f"evogen: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"evogen: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except np.linalg.LinAlgError as exc:
        print(f"evogen: numerical error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
