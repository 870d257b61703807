"""``mvreg`` command line: phantom, drr, mvsim, dataset, train, register, evaluate, repro.

Every subcommand accepts ``--config FILE`` and the full set of configuration
flags; see ``mvreg <command> --help``.  Outputs go under ``--out-dir`` unless
a path is given explicitly.
"""

import argparse
import json
import logging
import multiprocessing
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .cnn import Architecture, CnnModel, load_model, train
from .config import config_keys, get_value, load_config, profile_defaults, to_json
from .dataset import (
    PackedDataset,
    generate_test_set,
    generate_training_set,
    load_dataset,
    pack_test_set,
    save_dataset,
    spec_to_json,
    unpack_test_set,
)
from .errors import ConfigError, MvregError, ValidationError
from .evaluation import aggregate, compare_methods, final_deviations
from .image import export_pgm, load_image, save_image
from .mv_sim import simulate_mv
from .projection import Displacement2D, render_drr
from .registration import METHODS, register_classical, register_cnn
from .seeding import derive_seed
from .volume import generate_phantom, head_phantom_spec, load_volume, save_volume

log = logging.getLogger("mvreg")

# config keys whose flag is not the mechanical ``--section-field`` name
ALIASES = {
    "similarity_kind": "--similarity",
    "cnn_max_iters": "--max-iters",
    "optimizer.kind": "--optimizer",
    "optimizer.tolerance": "--tolerance",
}
CHOICES = {
    "profile": ("desk", "paper"),
    "similarity_kind": ("cc", "mi", "pi"),
    "optimizer.kind": ("simplex", "powell"),
    "train.decay_per": ("update", "epoch"),
}
CNN_LABEL = "CNN"


def flag_for(key):
    return ALIASES.get(key, "--" + key.replace(".", "-").replace("_", "-"))


def _dest(key):
    return "cfg__" + key.replace(".", "__")


def _add_config_flags(parser):
    desk = profile_defaults("desk")
    paper = profile_defaults("paper")
    group = parser.add_argument_group("configuration (flags override --config)")
    group.add_argument("--config", default=None, help="JSON config file (default: none)")
    for key in config_keys():
        default = get_value(desk, key)
        kw = {"dest": _dest(key), "default": argparse.SUPPRESS}
        if isinstance(default, tuple):
            kw.update(nargs="+", type=type(default[0]), metavar="V")
            shown = " ".join(str(v) for v in default)
        else:
            kw["type"] = type(default)
            shown = str(default)
            if key not in CHOICES:
                kw["metavar"] = key.rsplit(".", 1)[-1].upper()
        if key in CHOICES:
            kw["choices"] = CHOICES[key]
        if key == "jobs":
            shown = "number of processors"
        note = ""
        if key != "jobs" and get_value(paper, key) != default:
            other = get_value(paper, key)
            other = " ".join(str(v) for v in other) if isinstance(other, tuple) else other
            note = f"; paper profile: {other}"
        group.add_argument(flag_for(key), help=f"{key} (default: {shown}{note})", **kw)


def resolve_config(args, env=None):
    overrides = {}
    for key in config_keys():
        dest = _dest(key)
        if hasattr(args, dest):
            overrides[key] = getattr(args, dest)
    return load_config(args.config, overrides, env)


# --- helpers ------------------------------------------------------------------


def _out(cfg, *parts):
    path = os.path.join(cfg.out_dir, *parts)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    return path


def _ensure_parent(path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return path


def phantom_volume(cfg, index):
    spec = head_phantom_spec(derive_seed(cfg.seed, "phantom", index), cfg.volume.noise_hu)
    return generate_phantom(spec, cfg.volume.dims, cfg.volume.spacing_mm)


def dataset_spec(cfg):
    return replace(cfg.dataset, seed=derive_seed(cfg.seed, "dataset"))


def _write_json(path, obj):
    with open(_ensure_parent(path), "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


_POOL = {}


def _pool_call(i):
    return _POOL["fn"](_POOL["items"][i])


def run_parallel(fn, items, jobs):
    """Map ``fn`` over ``items``; results come back in input order."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    _POOL.update(fn=fn, items=items)
    try:
        with multiprocessing.get_context("fork").Pool(min(jobs, len(items))) as pool:
            return pool.map(_pool_call, range(len(items)))
    finally:
        _POOL.clear()


def _echo_geometry(g):
    return {
        "source_to_axis_mm": g.source_to_axis_mm,
        "source_to_detector_mm": g.source_to_detector_mm,
        "detector_dims": list(g.detector_dims),
        "detector_spacing": list(g.detector_spacing),
    }


# --- subcommands --------------------------------------------------------------


def cmd_phantom(cfg, args):
    vol = phantom_volume(cfg, args.index)
    path = args.output or _out(cfg, "phantoms", f"phantom-{args.index:02d}.vol")
    save_volume(vol, _ensure_parent(path))
    print(f"wrote {path}: dims {vol.dims}, spacing {vol.spacing}, HU [{vol.data.min():.0f}, {vol.data.max():.0f}]")
    if args.figure:
        from .plotting import plot_images

        nz, ny, nx = vol.data.shape
        plot_images(
            [vol.data[nz // 2], vol.data[:, ny // 2], vol.data[:, :, nx // 2]],
            ["axial", "coronal", "sagittal"],
            _ensure_parent(args.figure),
        )
    return 0


def cmd_drr(cfg, args):
    vol = load_volume(args.volume)
    drr = render_drr(vol, cfg.geometry, Displacement2D(args.lateral, args.longitudinal))
    path = args.output or _out(cfg, "drr.img")
    save_image(drr, _ensure_parent(path))
    if args.pgm:
        export_pgm(drr, _ensure_parent(args.pgm))
    print(f"wrote {path}: {drr.dims[0]}x{drr.dims[1]} px, line integral max {drr.data.max():.4f}")
    return 0


def cmd_mvsim(cfg, args):
    drr = load_image(args.drr)
    mv_cfg = replace(cfg.mv_sim, seed=derive_seed(cfg.seed, "mvsim"))
    mv = simulate_mv(drr, mv_cfg)
    path = args.output or _out(cfg, "mv.img")
    save_image(mv, _ensure_parent(path))
    if args.pgm:
        export_pgm(mv, _ensure_parent(args.pgm))
    print(f"wrote {path}")
    return 0


def build_datasets(cfg, raw=False):
    """Phantoms, training tensors, and the packed test grid under ``out_dir``."""
    spec = dataset_spec(cfg)
    spec.validate()
    files = {}
    volumes = {}
    for idx in tuple(spec.train_phantoms) + tuple(spec.test_phantoms):
        volumes[idx] = phantom_volume(cfg, idx)
        files[idx] = os.path.join("phantoms", f"phantom-{idx:02d}.vol")
        save_volume(volumes[idx], _out(cfg, files[idx]))
    raw_dir = None
    if raw:
        raw_dir = os.path.join(cfg.out_dir, "raw")
        os.makedirs(raw_dir, exist_ok=True)
    train_vols = [volumes[i] for i in spec.train_phantoms]
    x, y = generate_training_set(spec, train_vols, cfg.geometry, cfg.mv_sim, cfg.roi_mm, raw_dir)
    common = {
        "spec": spec_to_json(spec),
        "geometry": _echo_geometry(cfg.geometry),
        "roi_mm": cfg.roi_mm,
    }
    train_header = dict(common, volume_files=[files[i] for i in spec.train_phantoms])
    save_dataset(PackedDataset("train", x, y, train_header), _out(cfg, "train.ds"))
    cases = generate_test_set(spec, [volumes[i] for i in spec.test_phantoms], cfg.geometry, cfg.mv_sim, cfg.roi_mm)
    test_header = dict(common, volume_files=[files[i] for i in spec.test_phantoms])
    save_dataset(pack_test_set(cases, spec, test_header), _out(cfg, "test.ds"))
    return x, y, cases


def cmd_dataset(cfg, args):
    x, _, cases = build_datasets(cfg, raw=args.raw)
    print(f"wrote {cfg.out_dir}: {len(x)} training samples {tuple(x.shape[1:])}, {len(cases)} test cases")
    return 0


def train_model(cfg, x, y, model_path):
    arch = Architecture(height=x.shape[2], width=x.shape[3])
    model = CnnModel(arch, seed=derive_seed(cfg.seed, "cnn.init"))
    tcfg = replace(cfg.train, seed=derive_seed(cfg.seed, "train"))
    history = train(model, x, y, tcfg, checkpoint_path=_ensure_parent(model_path))
    return model, history


def cmd_train(cfg, args):
    ds = load_dataset(args.dataset or os.path.join(cfg.out_dir, "train.ds"))
    if ds.kind != "train":
        raise ValidationError(f"expected a training dataset, got kind {ds.kind!r}")
    path = args.model_out or _out(cfg, "model.cnn")
    _, history = train_model(cfg, ds.tensors, ds.targets, path)
    _write_json(os.path.join(os.path.dirname(os.path.abspath(path)), "loss.json"), history)
    from .plotting import plot_loss

    plot_loss(history, os.path.join(os.path.dirname(os.path.abspath(path)), "loss.png"))
    print(f"wrote {path}: final training loss {history[-1]:.4f} mm^2 after {len(history)} epochs")
    return 0


def load_test_cases(cfg, path):
    ds = load_dataset(path)
    if ds.kind != "test":
        raise ValidationError(f"expected a test dataset, got kind {ds.kind!r}")
    if "geometry" in ds.header and ds.header["geometry"] != _echo_geometry(cfg.geometry):
        raise ConfigError(
            f"{path} was built with geometry {ds.header['geometry']}, but the configuration says "
            f"{_echo_geometry(cfg.geometry)}; pass the same --profile/--config used for `dataset`"
        )
    base = os.path.dirname(os.path.abspath(path))
    volumes = [load_volume(os.path.join(base, f)) for f in ds.header.get("volume_files", [])]
    if not volumes:
        raise ValidationError(f"{path} lists no volume files")
    return unpack_test_set(ds, volumes, cfg.geometry)


def register_all(cfg, cases, engine, model=None, method=None, optimizer_kind=None, similarity_kind=None):
    """Register every case with one method; returns traces in case order."""
    if engine == "cnn":
        if model is None:
            raise ConfigError("--engine cnn needs --model")

        def fn(case):
            return register_cnn(
                case, model, cfg.cnn_max_iters, cfg.cnn_stop_eps_mm, cfg.mv_sim, cfg.roi_mm, method or CNN_LABEL
            )

    elif engine == "classical":
        opt = replace(cfg.optimizer, kind=optimizer_kind or cfg.optimizer.kind)
        kind = similarity_kind or cfg.similarity_kind

        def fn(case):
            return register_classical(case, kind, opt, cfg.roi_mm, cfg.mv_sim, cfg.similarity, method)

    else:
        raise ConfigError(f"unknown engine {engine!r}; expected cnn or classical")
    return run_parallel(fn, cases, cfg.jobs)


def write_traces(traces, path):
    with open(_ensure_parent(path), "w", encoding="utf-8") as fh:
        for tr in traces:
            for rec in tr.to_json_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_traces(paths):
    """JSONL files -> list of per-case record lists (grouped by method and case)."""
    groups = {}
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValidationError(f"{path}:{lineno}: bad trace record: {exc.msg}") from exc
                groups.setdefault((rec["method"], rec["case_id"]), []).append(rec)
    return [sorted(v, key=lambda r: r["iteration"]) for _, v in sorted(groups.items())]


def cmd_register(cfg, args):
    if args.engine == "cnn" and not args.model:
        raise ConfigError("register --engine cnn requires --model PATH")
    cases = load_test_cases(cfg, args.dataset or os.path.join(cfg.out_dir, "test.ds"))
    model = load_model(args.model) if args.engine == "cnn" else None
    traces = register_all(cfg, cases, args.engine, model)
    label = traces[0].method if traces else CNN_LABEL
    path = args.traces_out or _out(cfg, "traces", f"{label}.jsonl")
    write_traces(traces, path)
    print(f"wrote {path}: {len(traces)} cases")
    return 0


def evaluate_traces(trace_records, gold_by_case, out_stem, max_iters=3):
    """Write ``<stem>.csv``/``.md`` plus the CNN per-iteration table and figures."""
    from .plotting import plot_cnn_iterations, plot_deviation_boxes

    devs = final_deviations(trace_records, gold_by_case)
    reports = [aggregate(d, method=m) for m, d in devs.items()]
    md, csv_text = compare_methods(reports)
    base = os.path.dirname(os.path.abspath(out_stem))
    os.makedirs(base, exist_ok=True)
    with open(out_stem + ".csv", "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    with open(out_stem + ".md", "w", encoding="utf-8") as fh:
        fh.write(md)
    os.makedirs(os.path.join(base, "figures"), exist_ok=True)
    plot_deviation_boxes(reports, os.path.join(base, "figures", "deviations.png"))
    cnn = [recs for recs in trace_records if recs and recs[0]["method"] == CNN_LABEL]
    iter_reports = []
    if cnn:
        for k in range(1, max_iters + 1):
            d = final_deviations(cnn, gold_by_case, iteration=k)[CNN_LABEL]
            iter_reports.append(aggregate(d, method=f"{CNN_LABEL}-{k}iter"))
        md_it, csv_it = compare_methods(iter_reports)
        with open(os.path.join(base, "cnn_iterations.csv"), "w", encoding="utf-8") as fh:
            fh.write(csv_it)
        with open(os.path.join(base, "cnn_iterations.md"), "w", encoding="utf-8") as fh:
            fh.write(md_it)
        plot_cnn_iterations(iter_reports, os.path.join(base, "figures", "cnn_iterations.png"))
    return reports, iter_reports, md


def _gold_map(path):
    ds = load_dataset(path)
    return {cid: [float(a), float(b)] for cid, (a, b) in zip(ds.header["case_ids"], ds.targets)}


def _trace_files(spec):
    if os.path.isdir(spec):
        files = sorted(os.path.join(spec, f) for f in os.listdir(spec) if f.endswith(".jsonl"))
    else:
        files = [spec]
    if not files:
        raise ValidationError(f"no .jsonl trace files in {spec}")
    return files


def cmd_evaluate(cfg, args):
    traces = read_traces(_trace_files(args.traces or os.path.join(cfg.out_dir, "traces")))
    gold = _gold_map(args.gold or os.path.join(cfg.out_dir, "test.ds"))
    stem = args.out or os.path.join(cfg.out_dir, "report")
    stem = os.path.splitext(stem)[0] if stem.endswith((".csv", ".md")) else stem
    _, _, md = evaluate_traces(traces, gold, stem, cfg.cnn_max_iters)
    print(md, end="")
    return 0


def cmd_repro(cfg, args):
    timings = {}
    t0 = time.perf_counter()
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write_json(os.path.join(cfg.out_dir, "config.json"), to_json(cfg))
    x, y, cases = build_datasets(cfg)
    timings["dataset_s"] = time.perf_counter() - t0

    t = time.perf_counter()
    model, history = train_model(cfg, x, y, _out(cfg, "model.cnn"))
    _write_json(os.path.join(cfg.out_dir, "loss.json"), history)
    timings["train_s"] = time.perf_counter() - t
    from .plotting import plot_loss

    os.makedirs(os.path.join(cfg.out_dir, "figures"), exist_ok=True)
    plot_loss(history, os.path.join(cfg.out_dir, "figures", "loss.png"))

    all_records = []
    per_case_time = {}
    runs = [(CNN_LABEL, "cnn", None, None)] + [(m, "classical", o, s) for m, (o, s) in METHODS.items()]
    for label, engine, opt_kind, sim_kind in runs:
        t = time.perf_counter()
        traces = register_all(cfg, cases, engine, model, label, opt_kind, sim_kind)
        timings[f"register_{label}_s"] = time.perf_counter() - t
        per_case_time[label] = float(np.mean([sum(r["wall_time_s"] for r in tr.records) for tr in traces]))
        write_traces(traces, _out(cfg, "traces", f"{label}.jsonl"))
        all_records += [tr.to_json_records() for tr in traces]
        log.info("%s done in %.1f s", label, timings[f"register_{label}_s"])
    gold = {c.case_id: [c.gold.lateral_mm, c.gold.longitudinal_mm] for c in cases}
    _, iter_reports, md = evaluate_traces(all_records, gold, os.path.join(cfg.out_dir, "report"), cfg.cnn_max_iters)
    timings["total_s"] = time.perf_counter() - t0
    timings["mean_case_wall_time_s"] = per_case_time
    _write_json(os.path.join(cfg.out_dir, "timings.json"), timings)
    print(md, end="")
    for r in iter_reports:
        print(f"{r.method}: mean {r.mean_mm:.2f} mm, FPR {r.fpr_percent:.2f}%")
    print(f"repro finished in {timings['total_s']:.0f} s; outputs in {cfg.out_dir}")
    return 0


# --- parser -------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mvreg",
        description="2D/3D MV image registration: phantoms, DRRs, MV simulation, CNN and classical engines.",
    )
    parser.add_argument("--version", action="version", version=f"mvreg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_config_flags(p)
        return p

    p = add("phantom", "generate a procedural head phantom (.vol)")
    p.add_argument("--index", type=int, default=0, help="phantom index (default: 0)")
    p.add_argument("--output", default=None, help="output .vol (default: OUT_DIR/phantoms/phantom-NN.vol)")
    p.add_argument("--figure", default=None, help="also save a PNG of the central slices (default: none)")
    p.set_defaults(func=cmd_phantom)

    p = add("drr", "render a DRR from a .vol at a displacement")
    p.add_argument("--volume", required=True, help="input .vol (required)")
    p.add_argument("--lateral", type=float, default=0.0, help="lateral shift in mm (default: 0.0)")
    p.add_argument("--longitudinal", type=float, default=0.0, help="longitudinal shift in mm (default: 0.0)")
    p.add_argument("--output", default=None, help="output .img (default: OUT_DIR/drr.img)")
    p.add_argument("--pgm", default=None, help="also export a 16-bit PGM (default: none)")
    p.set_defaults(func=cmd_drr)

    p = add("mvsim", "turn a DRR (.img) into a simulated MV image")
    p.add_argument("--drr", required=True, help="input DRR .img (required)")
    p.add_argument("--output", default=None, help="output .img (default: OUT_DIR/mv.img)")
    p.add_argument("--pgm", default=None, help="also export a 16-bit PGM (default: none)")
    p.set_defaults(func=cmd_mvsim)

    p = add("dataset", "build phantoms, train.ds and test.ds in OUT_DIR")
    p.add_argument("--raw", action="store_true", help="also keep raw training images (default: off)")
    p.set_defaults(func=cmd_dataset)

    p = add("train", "train the CNN on a training .ds")
    p.add_argument("--dataset", default=None, help="training .ds (default: OUT_DIR/train.ds)")
    p.add_argument("--model-out", default=None, help="output .cnn (default: OUT_DIR/model.cnn)")
    p.set_defaults(func=cmd_train)

    p = add("register", "register every case of a test .ds and write JSONL traces")
    p.add_argument("--engine", choices=("cnn", "classical"), default="cnn", help="engine (default: cnn)")
    p.add_argument("--model", default=None, help="trained .cnn, required for --engine cnn (default: none)")
    p.add_argument("--dataset", default=None, help="test .ds (default: OUT_DIR/test.ds)")
    p.add_argument("--traces-out", default=None, help="output .jsonl (default: OUT_DIR/traces/METHOD.jsonl)")
    p.set_defaults(func=cmd_register)

    p = add("evaluate", "summarize traces into CSV/MD reports and figures")
    p.add_argument("--traces", default=None, help="trace directory or .jsonl file (default: OUT_DIR/traces)")
    p.add_argument("--gold", default=None, help="test .ds with gold shifts (default: OUT_DIR/test.ds)")
    p.add_argument("--out", default=None, help="report path stem; writes .csv and .md (default: OUT_DIR/report)")
    p.set_defaults(func=cmd_evaluate)

    p = add("repro", "full pipeline: datasets, training, all 7 methods, evaluation")
    p.set_defaults(func=cmd_repro)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s: %(message)s"
    )
    try:
        cfg = resolve_config(args)
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"mvreg: error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 2
    except (MvregError, OSError) as exc:
        print(f"mvreg: error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
