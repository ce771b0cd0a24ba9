"""``patool``: command-line front end.

Exit codes: 0 success, 2 usage or configuration error, 3 attack budget
exhausted without success, 4 I/O error (unreadable or corrupt files, failed
writes).
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, AttackDivergedError, EotConfig, RoomSampler, run_attack, run_attack_eot
from .audio import AudioFormatError, FrameConfig, Waveform, load_wav, save_wav
from .ctc import InfeasibleTargetError, ModelFormatError, load_model, save_model, transcribe
from .metrics import evaluate, reports_to_csv, reports_to_jsonl
from .psychoacoustic import DEFAULT_BETA, analyze, export_spl_csv, export_threshold_csv
from .room import (
    RoomBankFormatError, RoomRanges, RoomSpec, Rir, apply_room, image_source_rir, load_room_bank,
    sample_room_bank, save_room_bank,
)

EXIT_OK, EXIT_USAGE, EXIT_ATTACK_FAILED, EXIT_IO = 0, 2, 3, 4
MODEL_ENV = "PATOOL_MODEL"


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"patool: error: {msg}", file=sys.stderr)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{p}: no such file")
    return p


def _model_path(arg) -> Path:
    path = arg or os.environ.get(MODEL_ENV)
    if not path:
        raise UsageError(f"no model given (use --model or set {MODEL_ENV})")
    return _existing(path)


def _write_manifest(out_dir: Path, command: str, config: dict, inputs: dict, seed, outputs: dict) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {k: {"path": str(Path(v).resolve()), "sha256": _sha256(v)} for k, v in inputs.items()},
        "seed": seed,
        "tool_version": __version__,
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# threshold


def cmd_threshold(args) -> int:
    x = load_wav(_existing(args.input))
    cfg = FrameConfig(args.frame_len, args.frame_len, args.window)
    analysis = analyze(x, cfg, beta=args.beta)
    export_threshold_csv(analysis, args.output)
    if args.psd_out:
        export_spl_csv(analysis, args.psd_out)
    print(f"wrote {analysis.n_frames} frames to {args.output}", file=sys.stderr)
    return EXIT_OK


# attack

ATTACK_KEYS = {
    "alpha": float, "epsilon": float, "units": str, "mu": float, "max_iters": int, "beta": float,
    "seed": int, "percep_units": str, "check_every": int,
}
EOT_KEYS = {"num_rooms": int, "rooms_per_iter": int, "bandpass": None, "bank_seed": int}


def read_attack_config(path) -> tuple[dict, dict | None]:
    """Parse an attack spec file: an ``[attack]`` section plus an optional ``[eot]`` one."""
    cp = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as f:
            cp.read_file(f)
    except configparser.Error as e:
        raise UsageError(f"{path}: {e}") from e
    unknown = set(cp.sections()) - {"attack", "eot"}
    if unknown:
        raise UsageError(f"{path}: unknown sections {sorted(unknown)}")
    attack = {}
    if cp.has_section("attack"):
        for key, value in cp.items("attack"):
            if key == "target":
                attack["target"] = value
                continue
            if key not in ATTACK_KEYS:
                raise UsageError(f"{path}: unknown attack key {key!r}")
            try:
                attack[key] = ATTACK_KEYS[key](value)
            except ValueError as e:
                raise UsageError(f"{path}: bad value for {key}: {value!r}") from e
    eot = None
    if cp.has_section("eot"):
        eot = {}
        for key in cp.options("eot"):
            if key not in EOT_KEYS:
                raise UsageError(f"{path}: unknown eot key {key!r}")
            try:
                eot[key] = cp.getboolean("eot", key) if key == "bandpass" else EOT_KEYS[key](cp.get("eot", key))
            except ValueError as e:
                raise UsageError(f"{path}: bad value for {key}") from e
    return attack, eot


def _resolve_attack(args) -> tuple[AttackConfig, str, dict | None]:
    values, eot = ({}, None)
    if args.config:
        values, eot = read_attack_config(_existing(args.config))
    for key in ATTACK_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    target = args.target if args.target is not None else values.pop("target", None)
    values.pop("target", None)
    if not target:
        raise UsageError("no target phrase (use --target or set target in the config file)")
    if args.eot or args.room_bank:
        eot = dict(eot or {})
    if eot is not None:
        if args.rooms_per_iter is not None:
            eot["rooms_per_iter"] = args.rooms_per_iter
        if args.no_bandpass:
            eot["bandpass"] = False
        values["eot"] = EotConfig(**eot)
    return AttackConfig(**values), target, eot


def _eot_rooms(cfg: AttackConfig, bank_path):
    """Training rooms plus a held-out check room (the bank's last entry)."""
    if bank_path:
        rirs, _ = load_room_bank(_existing(bank_path))
        if len(rirs) < 2:
            raise UsageError("room bank needs at least 2 rooms (training rooms + check room)")
        return rirs[:-1], rirs[-1]
    rirs = sample_room_bank(cfg.eot.num_rooms + 1, seed=cfg.eot.bank_seed)
    return rirs[:-1], rirs[-1]


def _progress(every: int):
    if every <= 0:
        return None

    def report(it, loss, success):
        if it % every == 0 or success:
            print(f"iter {it}: L_tot={loss:.6g}{' success' if success else ''}", file=sys.stderr)

    return report


def cmd_attack(args) -> int:
    if args.from_manifest:
        return _attack_from_manifest(args)
    input_path = _existing(args.input) if args.input else None
    if input_path is None:
        raise UsageError("an input wav is required")
    if not args.out_dir:
        raise UsageError("--out-dir is required")
    try:
        cfg, target, _ = _resolve_attack(args)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e
    model_path = _model_path(args.model)
    return _run_attack(input_path, model_path, cfg, target, Path(args.out_dir), args.room_bank,
                       args.progress_every)


def _run_attack(input_path, model_path, cfg: AttackConfig, target, out_dir: Path, room_bank,
                progress_every: int) -> int:
    x = load_wav(input_path)
    model = load_model(model_path)
    analysis = analyze(x, beta=cfg.beta)
    progress = _progress(progress_every)
    rir = None
    if cfg.eot is not None:
        rooms, check = _eot_rooms(cfg, room_bank)
        k = min(cfg.eot.rooms_per_iter, len(rooms))
        sampler = RoomSampler(rooms, k, check, seed=cfg.seed)
        result = run_attack_eot(x, target, model, cfg, sampler, analysis, progress)
        rir = check
    else:
        result = run_attack(x, target, model, cfg, analysis, progress)
    out_dir.mkdir(parents=True, exist_ok=True)
    adv = np.clip(x.samples + result.delta, -1.0, 1.0)
    outputs = {
        "adversarial": out_dir / "adversarial.wav",
        "delta": out_dir / "delta.wav",
        "loss_trace": out_dir / "loss_trace.csv",
        "report": out_dir / "report.jsonl",
    }
    save_wav(Waveform(adv, x.sample_rate_hz), outputs["adversarial"])
    save_wav(Waveform(np.clip(result.delta, -1.0, 1.0), x.sample_rate_hz), outputs["delta"])
    outputs["loss_trace"].write_text(result.trace_csv(), encoding="utf-8")
    reports = [evaluate(x, result.delta, target, model, analysis)]
    if rir is not None:
        reports.append(evaluate(x, result.delta, target, model, analysis, rir=rir,
                                bandpass=cfg.eot.bandpass, label="check_room"))
    outputs["report"].write_text(reports_to_jsonl(reports), encoding="utf-8")
    config = asdict(cfg)
    config["target"] = target
    config["epsilon_normalized"] = cfg.epsilon_norm
    config["mu_normalized"] = cfg.mu_norm
    inputs = {"input": input_path, "model": model_path}
    if room_bank:
        inputs["room_bank"] = room_bank
    _write_manifest(out_dir, "attack", config, inputs, cfg.seed, outputs)
    status = "success" if result.success else "budget exhausted"
    print(f"{status} after {result.iterations_used} iterations; decoded {result.decoded!r}", file=sys.stderr)
    return EXIT_OK if result.success else EXIT_ATTACK_FAILED


def _attack_from_manifest(args) -> int:
    path = _existing(args.from_manifest)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        if manifest.get("command") != "attack":
            raise UsageError(f"{path}: not an attack manifest")
        config = dict(manifest["config"])
        inputs = manifest["inputs"]
    except (json.JSONDecodeError, KeyError) as e:
        raise UsageError(f"{path}: malformed manifest ({e})") from e
    for name, info in inputs.items():
        if _sha256(_existing(info["path"])) != info["sha256"]:
            raise UsageError(f"input {name} ({info['path']}) changed since the manifest was written")
    target = config.pop("target")
    config.pop("epsilon_normalized", None)
    config.pop("mu_normalized", None)
    eot = config.pop("eot", None)
    cfg = AttackConfig(**config, eot=EotConfig(**eot) if eot else None)
    out_dir = Path(args.out_dir) if args.out_dir else Path(manifest["outputs"]["adversarial"]).parent
    bank = inputs.get("room_bank", {}).get("path")
    return _run_attack(Path(inputs["input"]["path"]), Path(inputs["model"]["path"]), cfg, target,
                       out_dir, bank, args.progress_every)


# simulate


def _parse_triple(text: str, name: str):
    try:
        v = tuple(float(s) for s in text.split(","))
    except ValueError as e:
        raise UsageError(f"--{name} needs comma-separated numbers") from e
    if len(v) != 3:
        raise UsageError(f"--{name} needs three values")
    return v


def cmd_simulate(args) -> int:
    if args.make_bank:
        ranges = RoomRanges()
        rirs = sample_room_bank(args.rooms, ranges, seed=args.seed)
        save_room_bank(rirs, args.make_bank, seed=args.seed, ranges=ranges)
        print(f"wrote {len(rirs)} rooms to {args.make_bank}", file=sys.stderr)
        if not args.input:
            return EXIT_OK
    if not args.input or not args.output:
        raise UsageError("simulate needs an input and an output wav")
    x = load_wav(_existing(args.input))
    if args.identity:
        rir = Rir.identity()
    elif args.bank:
        rirs, _ = load_room_bank(_existing(args.bank))
        if not 0 <= args.index < len(rirs):
            raise UsageError(f"--index {args.index} out of range for a bank of {len(rirs)}")
        rir = rirs[args.index]
    elif args.dims:
        try:
            spec = RoomSpec(
                dims=_parse_triple(args.dims, "dims"), reflection=args.reflection,
                source=_parse_triple(args.source, "source"), mic=_parse_triple(args.mic, "mic"),
                max_order=args.order, sample_rate_hz=x.sample_rate_hz,
            )
        except TypeError as e:
            raise UsageError("--dims needs --source and --mic") from e
        rir = image_source_rir(spec)
    else:
        raise UsageError("choose a room: --identity, --bank (with --index) or --dims/--source/--mic")
    save_wav(apply_room(x, rir, args.bandpass), args.output)
    return EXIT_OK


# evaluate


def cmd_evaluate(args) -> int:
    x = load_wav(_existing(args.original))
    adv = load_wav(_existing(args.adversarial))
    if len(x.samples) != len(adv.samples):
        raise UsageError(f"length mismatch: {len(x.samples)} vs {len(adv.samples)} samples")
    model = load_model(_model_path(args.model))
    analysis = analyze(x, beta=args.beta)
    delta = adv.samples - x.samples
    reports = [evaluate(x, delta, args.target, model, analysis)]
    if args.room:
        rirs, _ = load_room_bank(_existing(args.room))
        reports += [evaluate(x, delta, args.target, model, analysis, rir=r, bandpass=args.bandpass,
                             label=f"room{i}") for i, r in enumerate(rirs)]
    text = reports_to_csv(reports) if args.format == "csv" else reports_to_jsonl(reports)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# train-toy


def cmd_train_toy(args) -> int:
    from .corpus import read_manifest, training_corpus, write_manifest
    from .ctc import fit_feature_stats, init_model, train_toy

    if args.manifest:
        data = read_manifest(_existing(args.manifest))
        if not data:
            raise UsageError(f"{args.manifest}: manifest lists no utterances")
    else:
        data = training_corpus(seed=args.seed, n_phrases=args.phrases)
        if args.write_corpus:
            write_manifest(data, args.write_corpus)
    model = fit_feature_stats(init_model(args.seed, hidden=args.hidden), [w for w, _ in data])
    result = train_toy(model, data, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed)
    save_model(result.model, args.output)
    correct = sum(transcribe(result.model, w) == t for w, t in data)
    print(f"loss {result.epoch_losses[0]:.4g} -> {result.epoch_losses[-1]:.4g}; "
          f"{correct}/{len(data)} exact; {result.skipped} skipped", file=sys.stderr)
    return EXIT_OK


def _unit_float(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"alpha must lie in [0, 1], got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="patool", description="Psychoacoustic adversarial audio toolkit.")
    p.add_argument("--version", action="version", version=f"patool {__version__}")
    p.add_argument("--jobs", type=int, default=1, help="worker cap (commands currently run single-process)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("threshold", help="per-frame global masking threshold CSV")
    t.add_argument("input")
    t.add_argument("output")
    t.add_argument("--frame-len", type=int, default=512)
    t.add_argument("--window", choices=("hann", "rectangular"), default="hann")
    t.add_argument("--beta", type=float, default=DEFAULT_BETA)
    t.add_argument("--psd-out", help="also write the SPL-normalized PSD")
    t.set_defaults(func=cmd_threshold)

    a = sub.add_parser("attack", help="targeted perceptual attack")
    a.add_argument("input", nargs="?")
    a.add_argument("--target")
    a.add_argument("--config", help="attack spec file ([attack] and optional [eot] sections)")
    a.add_argument("--out-dir")
    a.add_argument("--model", help=f"model file (default: ${MODEL_ENV})")
    a.add_argument("--alpha", type=_unit_float)
    a.add_argument("--epsilon", type=float)
    a.add_argument("--units", choices=("int16", "normalized"))
    a.add_argument("--mu", type=float)
    a.add_argument("--max-iters", dest="max_iters", type=int)
    a.add_argument("--beta", type=float)
    a.add_argument("--seed", type=int)
    a.add_argument("--check-every", dest="check_every", type=int)
    a.add_argument("--eot", action="store_true", help="optimize over simulated rooms")
    a.add_argument("--room-bank", help="bank for EOT; its last room is the held-out check room")
    a.add_argument("--rooms-per-iter", type=int)
    a.add_argument("--no-bandpass", action="store_true")
    a.add_argument("--from-manifest", help="re-run exactly as recorded in a manifest.json")
    a.add_argument("--progress-every", type=int, default=100)
    a.set_defaults(func=cmd_attack, percep_units=None)

    s = sub.add_parser("simulate", help="pass audio through a simulated room")
    s.add_argument("input", nargs="?")
    s.add_argument("output", nargs="?")
    s.add_argument("--identity", action="store_true", help="unit-impulse room")
    s.add_argument("--bank")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--dims")
    s.add_argument("--source")
    s.add_argument("--mic")
    s.add_argument("--reflection", type=float, default=0.5)
    s.add_argument("--order", type=int, default=3)
    s.add_argument("--bandpass", action="store_true")
    s.add_argument("--make-bank", help="write a seeded room bank to this path")
    s.add_argument("--rooms", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="WER/CER/SNR/masking report")
    e.add_argument("original")
    e.add_argument("adversarial")
    e.add_argument("--target", required=True)
    e.add_argument("--model")
    e.add_argument("--beta", type=float, default=DEFAULT_BETA)
    e.add_argument("--room", help="room bank; adds one row per room")
    e.add_argument("--bandpass", action="store_true")
    e.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    e.add_argument("--output")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("train-toy", help="train the micro CTC model")
    r.add_argument("--manifest", help="CSV of wav,transcript; default is the built-in synthetic corpus")
    r.add_argument("--output", "-o", required=True)
    r.add_argument("--write-corpus", help="also dump the synthetic corpus (wavs + manifest) here")
    r.add_argument("--phrases", type=int, default=40)
    r.add_argument("--epochs", type=int, default=60)
    r.add_argument("--lr", type=float, default=1e-3)
    r.add_argument("--batch-size", type=int, default=4)
    r.add_argument("--hidden", type=int, default=128)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_train_toy)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        _err(str(e))
        return EXIT_USAGE
    except (AudioFormatError, ModelFormatError, RoomBankFormatError) as e:
        _err(str(e))
        return EXIT_IO
    except AttackDivergedError as e:
        _err(str(e))
        return EXIT_ATTACK_FAILED
    except (InfeasibleTargetError, ValueError, TypeError) as e:
        _err(str(e))
        return EXIT_USAGE
    except OSError as e:
        _err(str(e))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
