"""Batch front end: prune -> compile -> simulate, plus storage and energy reports.

Exit codes: 0 success, 1 configuration error, 2 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import ppw_format, tensors
from .compiler import ComplianceError, compile_chain, decode_ppw
from .energy import calibrate, calibration_document, energy_report, load_coefficients
from .networks import CHAINABLE, ConvLayerSpec, get_network, unique_layers
from .pipeline import build_stages, layer_shapes, random_input, run_all_modes
from .pruning import PpsConfig
from .storage import (FORMATS, get_policy, network_storage, rows_to_csv, storage_rows, threshold)
from .systolic import MODES, Stage, dense_reference_chain, ofm_checksum

log = logging.getLogger("spsflow")

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2


class ConfigError(Exception):
    pass


class VerificationError(Exception):
    pass


@dataclass
class PipelineConfig:
    network: str | None = "vgg16"
    layers: list[dict] | None = None
    P: int = 8
    KSS: int = 2
    strategy: str = "magnitude"
    patterns: list | None = None
    sys_w: int = 4
    sys_h: int = 4
    pad: int | None = None
    input_hw: int = 32
    preset: str = "paper-calibrated"
    coefficients: str | None = None
    out: str = "out"
    seed: int = 0
    nlr: bool = True
    input_dir: str | None = None

    def validate(self) -> None:
        if (self.network is None) == (self.layers is None):
            raise ConfigError("give exactly one of 'network' or 'layers'")
        if self.network is not None:
            try:
                get_network(self.network)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        for name in ("P", "KSS", "sys_w", "sys_h", "input_hw"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.strategy not in ("magnitude", "fixed"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "fixed" and not self.patterns:
            raise ConfigError("strategy 'fixed' needs 'patterns'")
        try:
            get_policy(self.preset)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for path in (self.coefficients, self.input_dir):
            if path is not None and not Path(path).exists():
                raise ConfigError(f"referenced path does not exist: {path}")
        layers = self.conv_layers()
        if not layers:
            raise ConfigError("no layers configured")
        for layer in layers:
            if layer.k * layer.k < self.KSS:
                raise ConfigError(f"{layer.name}: KSS={self.KSS} exceeds a {layer.k}x{layer.k} kernel")

    def conv_layers(self) -> list[ConvLayerSpec]:
        if self.network is not None:
            return list(get_network(self.network))
        try:
            return [ConvLayerSpec(d.get("name", f"conv{n + 1}"), int(d["c_in"]), int(d["c_out"]),
                                  int(d.get("k", 3)), int(d.get("stride", 1)), bool(d.get("pool", False)),
                                  d.get("group", d.get("name", f"conv{n + 1}")))
                    for n, d in enumerate(self.layers)]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad layer entry: {exc}") from None

    def chainable(self) -> bool:
        return self.network is None or self.network in CHAINABLE

    def out_dir(self, sub: str) -> Path:
        path = Path(self.out) / sub
        path.mkdir(parents=True, exist_ok=True)
        return path


def load_config(args) -> PipelineConfig:
    values = {}
    if args.config:
        try:
            with open(args.config) as f:
                values = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    if "layers" in values and "network" not in values:
        values["network"] = None
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("seed", "preset", "out", "coefficients"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    if getattr(args, "nlr", None) is not None:
        values["nlr"] = args.nlr == "on"
    if getattr(args, "input", None) is not None:
        values["input_dir"] = args.input
    try:
        cfg = PipelineConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _stages(cfg: PipelineConfig) -> list[Stage]:
    try:
        return build_stages(cfg.conv_layers(), cfg.P, cfg.KSS, cfg.seed, cfg.strategy, cfg.pad,
                            cfg.patterns)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _layer_file(n: int, suffix: str) -> str:
    return f"layer{n:02d}{suffix}"


# -- commands -------------------------------------------------------------------

def cmd_prune(cfg: PipelineConfig, args) -> int:
    stages = _stages(cfg)
    out = cfg.out_dir("prune")
    report = []
    for n, (layer, st) in enumerate(zip(cfg.conv_layers(), stages)):
        tensors.save(st.weights, out / _layer_file(n, ".tensor"))
        st.cfg.save(out / _layer_file(n, ".pps.json"))
        kept = int((st.weights.values != 0).sum())
        report.append({"layer": layer.name, "shape": list(st.weights.shape),
                       "patterns": st.cfg.to_dict()["patterns"],
                       "nonzero_weights": kept, "density": kept / st.weights.values.size})
    _write_json(out / "patterns.json", report)
    log.info("pruned %d layers into %s", len(stages), out)
    return EXIT_OK


def _masked_inputs(cfg: PipelineConfig):
    if cfg.input_dir is None:
        stages = _stages(cfg)
        return [s.weights for s in stages], [s.cfg for s in stages]
    src = Path(cfg.input_dir)
    masked, cfgs = [], []
    for n in range(len(cfg.conv_layers())):
        try:
            masked.append(tensors.load(src / _layer_file(n, ".tensor")))
            cfgs.append(PpsConfig.load(src / _layer_file(n, ".pps.json")))
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read pruned layer {n} from {src}: {exc}") from None
    return masked, cfgs


def cmd_compile(cfg: PipelineConfig, args) -> int:
    masked, cfgs = _masked_inputs(cfg)
    nlr = cfg.nlr and cfg.chainable()
    try:
        layers = compile_chain(masked, cfgs, cfg.sys_w, cfg.sys_h, nlr)
    except ComplianceError as exc:
        raise VerificationError(f"non-compliant tensor: {exc}") from None
    out = cfg.out_dir("compile")
    manifest = []
    for n, (layer, t) in enumerate(zip(layers, masked)):
        blob = ppw_format.to_bytes(layer)
        path = out / _layer_file(n, ".ppw")
        path.write_bytes(blob)
        if args.verify and decode_ppw(ppw_format.from_bytes(path.read_bytes())) != t:
            raise VerificationError(f"layer {n}: decoded PPW file differs from the pruned tensor")
        manifest.append({
            "file": path.name, "bytes": len(blob),
            "index_section_bits": ppw_format.index_section_bits(layer.P, layer.KSS, layer.h_k, layer.w_k),
            "P": layer.P, "KSS": layer.KSS, "c_in": layer.c_in, "c_out": layer.c_out,
            "IC_p": layer.ic_p, "OC_p": layer.oc_p, "INC_p": layer.inc_p, "ONC_p": layer.onc_p,
            "W_NUM": layer.w_num, "input_reordered": not layer.ic_table.is_identity(),
        })
    _write_json(out / "manifest.json", {"nlr": nlr, "verified": bool(args.verify), "layers": manifest})
    log.info("compiled %d layers into %s", len(layers), out)
    return EXIT_OK


def _require_chain(cfg: PipelineConfig) -> None:
    if not cfg.chainable():
        raise ConfigError(f"network {cfg.network!r} is not a plain chain and cannot be simulated")


def cmd_simulate(cfg: PipelineConfig, args) -> int:
    _require_chain(cfg)
    stages = _stages(cfg)
    first = stages[0].weights
    ifm = random_input(cfg.seed, first.c_in, cfg.input_hw, cfg.input_hw)
    try:
        results = run_all_modes(stages, ifm, cfg.sys_w, cfg.sys_h, cfg.nlr)
        oracle = ofm_checksum(dense_reference_chain(stages, ifm))
        dense_oracle = ofm_checksum(dense_reference_chain(stages, ifm, use_dense=True))
    except (ValueError, OverflowError) as exc:
        raise ConfigError(str(exc)) from None
    expected = {m: oracle for m in MODES}
    expected["dense_baseline"] = dense_oracle
    mismatched = [m for m, r in results.items() if r.checksum() != expected[m]]
    if mismatched:
        raise VerificationError(f"output differs from the dense reference in modes {mismatched}")
    out = cfg.out_dir("simulate")
    for mode, res in results.items():
        (out / f"{mode}.json").write_text(res.to_json() + "\n")
    _write_json(out / "summary.json", {
        "nlr": cfg.nlr, "oracle_checksum": oracle, "dense_oracle_checksum": dense_oracle,
        "checksums": {m: r.checksum() for m, r in results.items()},
    })
    log.info("simulation outputs match the reference in all %d modes", len(results))
    return EXIT_OK


def _shapes(cfg: PipelineConfig, unique: bool = True):
    layers = cfg.conv_layers()
    if unique:
        layers = unique_layers(layers)
    return layer_shapes(layers, cfg.KSS, "group" if unique else "name")


def cmd_storage_report(cfg: PipelineConfig, args) -> int:
    policy = get_policy(cfg.preset)
    shapes = _shapes(cfg)
    rows = storage_rows(shapes, policy, cfg.P, cfg.KSS)
    out = cfg.out_dir("storage")
    (out / "storage.csv").write_text(rows_to_csv(rows))
    ppw = network_storage("ppw", shapes, policy, cfg.P, cfg.KSS)
    full = _shapes(cfg, unique=False)
    fkw_idx = network_storage("fkw", full, policy, cfg.P, cfg.KSS).index_bits
    summary = {
        "preset": cfg.preset,
        "ratio_to_ppw": {f: network_storage(f, shapes, policy, cfg.P, cfg.KSS).total_bits / ppw.total_bits
                         for f in FORMATS},
        "fkw_to_ppw_index_ratio": {
            "per_layer_buffers": fkw_idx / network_storage("ppw", full, policy, cfg.P, cfg.KSS).index_bits,
            "shared_buffers": fkw_idx / network_storage("ppw", full, policy, cfg.P, cfg.KSS,
                                                        shared_ppw_buffers=True).index_bits,
        },
    }
    _write_json(out / "storage.json", {"rows": rows, "summary": summary})
    return EXIT_OK


def threshold_rows(cfg: PipelineConfig) -> list[dict]:
    policy = get_policy(cfg.preset)
    shapes = _shapes(cfg)
    rows = []
    for base in ("dense", "ppw"):
        base_storage = network_storage(base, shapes, policy, cfg.P, cfg.KSS)
        for fmt in FORMATS:
            if fmt == base:
                continue
            if fmt == "dense":
                d = 1.0 if network_storage("dense", shapes, policy).total_bits <= base_storage.total_bits else None
            else:
                d = threshold(fmt, base_storage, shapes, policy, cfg.P, cfg.KSS)
            rows.append({
                "baseline": base, "format": fmt,
                "kept_fraction": "unachievable" if d is None else round(d, 6),
                "pruned_percent": "unachievable" if d is None else round(100 * (1 - d), 4),
            })
    return rows


def cmd_threshold_bench(cfg: PipelineConfig, args) -> int:
    rows = threshold_rows(cfg)
    out = cfg.out_dir("threshold")
    (out / "threshold.csv").write_text(rows_to_csv(rows))
    _write_json(out / "threshold.json", {"preset": cfg.preset, "rows": rows})
    return EXIT_OK


def cmd_energy_report(cfg: PipelineConfig, args) -> int:
    _require_chain(cfg)
    stages = _stages(cfg)
    ifm = random_input(cfg.seed, stages[0].weights.c_in, cfg.input_hw, cfg.input_hw)
    counters = {m: r.counters for m, r in run_all_modes(stages, ifm, cfg.sys_w, cfg.sys_h, cfg.nlr).items()}
    out = cfg.out_dir("energy")
    if args.calibrate:
        coeffs = calibrate(counters)
        fixture = {"network": cfg.network, "input_hw": cfg.input_hw, "P": cfg.P, "KSS": cfg.KSS,
                   "sys_w": cfg.sys_w, "sys_h": cfg.sys_h, "seed": cfg.seed, "nlr": cfg.nlr}
        _write_json(out / "energy_coefficients.json", calibration_document(coeffs, fixture))
    else:
        coeffs = load_coefficients(cfg.coefficients)
    report = energy_report(counters, coeffs)
    rows = report.rows()
    (out / "energy.csv").write_text(rows_to_csv(rows))
    _write_json(out / "energy.json", {"coefficients": coeffs.to_dict(), "rows": rows,
                                      "counters": {m: c.as_dict() for m, c in counters.items()}})
    return EXIT_OK


COMMANDS = {
    "prune": cmd_prune,
    "compile": cmd_compile,
    "simulate": cmd_simulate,
    "storage-report": cmd_storage_report,
    "threshold-bench": cmd_threshold_bench,
    "energy-report": cmd_energy_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spsflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON pipeline config")
        p.add_argument("--seed", type=int)
        p.add_argument("--preset", choices=["analytic", "paper-calibrated"])
        p.add_argument("--nlr", choices=["on", "off"])
        p.add_argument("--out", help="output directory")
        p.add_argument("--verify", action="store_true", help="decode compiled files and diff them")
        p.add_argument("--input", help="directory with pruned layers (compile)")
        p.add_argument("--coefficients", help="energy coefficient file")
        p.add_argument("--calibrate", action="store_true",
                       help="fit energy coefficients on this workload and write them out")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
