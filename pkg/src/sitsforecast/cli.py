"""``sitsforecast`` command line: synth, train, forecast, evaluate, gradcheck.

Exit codes: 0 success, 1 runtime or validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import DETECTORS, RunConfig
from .errors import SitsForecastError

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


class _Failure(Exception):
    """Runtime failure reported to the user with exit code 1."""


def _load_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "detector", None):
        overrides["detector"] = args.detector
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise _Failure(f"config file {path} does not exist")
        return RunConfig.from_file(path, **overrides)
    return RunConfig(**overrides)


def _provenance(cfg: RunConfig, seed) -> dict:
    return {"config_hash": cfg.hash, "seed": seed, "tool_version": __version__}


# -- synth -----------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .sits_io import Scenario, generate_synthetic, write_sequence

    scenario = Scenario(kind=args.scenario, noise=args.noise)
    seqs = generate_synthetic(scenario, args.n, args.frames, args.size, seed=args.seed)
    out = Path(args.out)
    for seq in seqs:
        write_sequence(seq, out)
    print(f"wrote {len(seqs)} {args.scenario} sequences ({args.frames} frames, "
          f"{args.size}x{args.size}) to {out}")
    return EXIT_OK


# -- train -----------------------------------------------------------------------

def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .diffusion import StageConfig, init_model, train_stage
    from .sits_io import dumps_json, load_dataset

    cfg = _load_config(args)
    if args.stage > 0 and not args.checkpoint_in:
        raise _Failure(f"stage {args.stage} requires --checkpoint-in from a completed stage {args.stage - 1} run")
    if args.checkpoint_in:
        store = load_checkpoint(args.checkpoint_in)
    else:
        store = init_model(cfg, args.seed)
    data = load_dataset(args.data)
    stage_cfg = StageConfig.from_run_config(args.stage, cfg)
    log_every = max(1, stage_cfg.steps // 10) if args.verbose else 0
    report = train_stage(stage_cfg, data, store, cfg, seed=args.seed, log_every=log_every,
                         log=lambda s: print(s, file=sys.stderr))
    save_checkpoint(store, args.checkpoint_out)
    doc = report.to_dict()
    doc.update(_provenance(cfg, args.seed))
    if args.report:
        Path(args.report).write_text(dumps_json(doc), encoding="utf-8")
    tail = report.loss[-100:]
    final = f"{sum(tail) / len(tail):.6f}" if tail else "n/a"
    print(f"stage {args.stage}: {report.steps} steps, trailing loss {final}, "
          f"checkpoint {args.checkpoint_out}")
    return EXIT_OK


# -- forecast --------------------------------------------------------------------

def cmd_forecast(args) -> int:
    from .checkpoint import load_checkpoint
    from .diffusion import STAGE_META, sample_forecasts
    from .sits_io import dumps_json, load_dataset, write_ppm

    cfg = _load_config(args)
    store = load_checkpoint(args.checkpoint)
    if int(store.meta.get(STAGE_META, -1)) < 1:
        raise _Failure("forecasting needs a checkpoint that completed at least stage 1")
    data = load_dataset(args.data)
    histories, horizons = [], []
    for seq in data:
        if len(seq) < cfg.input_length:
            raise _Failure(f"{seq.id}: {len(seq)} frames, need at least {cfg.input_length}")
        hist, _, target_ts = seq.split(cfg.input_length)
        histories.append(hist)
        horizons.append(target_ts - hist.timestamps[-1] if target_ts is not None
                        else hist.timestamps[-1] - hist.timestamps[-2])
    mode = args.mode
    frames = sample_forecasts(histories, store, cfg, seed=args.seed, horizons=horizons, mode=mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seq, frame in zip(data, frames):
        write_ppm(out / f"{seq.id}.ppm", frame)
    index = {"forecasts": [f"{seq.id}.ppm" for seq in data], "mode": mode}
    index.update(_provenance(cfg, args.seed))
    (out / "forecasts.json").write_text(dumps_json(index), encoding="utf-8")
    print(f"wrote {len(data)} forecasts to {out}")
    return EXIT_OK


# -- evaluate --------------------------------------------------------------------

def _score_pair(m_hist, m_pred, tcs_cfg) -> dict:
    from .metrics import tcs_components

    return tcs_components(m_hist, m_pred, tcs_cfg)


def _evaluate_forecasts(args, cfg: RunConfig, tcs_cfg, det_cfg) -> list[dict]:
    from .metrics import detect_changes, psnr, ssim
    from .sits_io import load_dataset, read_ppm

    data = load_dataset(args.data)
    fdir = Path(args.forecasts)
    if not fdir.is_dir():
        raise _Failure(f"forecast directory {fdir} does not exist")
    available = {p.stem for p in fdir.glob("*.ppm")}
    wanted = [seq.id for seq in data]
    if len(available) != len(wanted) or set(wanted) != available:
        raise _Failure(f"{len(available)} forecasts for {len(wanted)} sequences; ids must match one to one")

    def one(seq) -> dict:
        hist, target, _ = seq.split(cfg.input_length)
        if len(hist) < 2:
            raise _Failure(f"{seq.id}: need two history frames for the historical change mask")
        forecast = read_ppm(fdir / f"{seq.id}.ppm")
        if forecast.shape != hist.shape:
            raise _Failure(f"{seq.id}: forecast shape {forecast.shape} != frame shape {hist.shape}")
        m_hist = detect_changes(hist.frames[-2], hist.frames[-1], det_cfg)
        m_pred = detect_changes(hist.frames[-1], forecast, det_cfg)
        row = {"id": seq.id, **_score_pair(m_hist, m_pred, tcs_cfg), "psnr": None, "ssim": None}
        if target is not None:
            row["psnr"] = psnr(forecast, target)
            if min(target.shape[:2]) >= 11:
                row["ssim"] = ssim(forecast, target)
        return row

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        return list(pool.map(one, data))


def _evaluate_masks(args, tcs_cfg) -> list[dict]:
    from .metrics import load_mask

    hist_dir, pred_dir = Path(args.masks_hist), Path(args.masks_pred)
    for d in (hist_dir, pred_dir):
        if not d.is_dir():
            raise _Failure(f"mask directory {d} does not exist")
    hist = sorted(hist_dir.glob("*.pbm"))
    pred = sorted(pred_dir.glob("*.pbm"))
    if [p.name for p in hist] != [p.name for p in pred]:
        raise _Failure(f"{len(hist)} historical and {len(pred)} predicted masks; file names must match")

    def one(pair) -> dict:
        h, p = pair
        return {"id": h.stem, **_score_pair(load_mask(h), load_mask(p), tcs_cfg), "psnr": None, "ssim": None}

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        return list(pool.map(one, zip(hist, pred)))


def cmd_evaluate(args) -> int:
    from .metrics import DetectorConfig, TcsConfig
    from .sits_io import write_report

    cfg = _load_config(args)
    tcs_cfg = TcsConfig(cfg.tcs_sigma, cfg.tcs_beta, cfg.tcs_epsilon, cfg.empty_mask_policy)
    det_cfg = DetectorConfig(cfg.detector, cfg.detector_tau, cfg.morphology)
    if args.masks_hist or args.masks_pred:
        if not (args.masks_hist and args.masks_pred):
            raise _Failure("--masks-hist and --masks-pred must be given together")
        rows = _evaluate_masks(args, tcs_cfg)
        detector = "external_mask_file"
    else:
        if not (args.data and args.forecasts):
            raise _Failure("give --data with --forecasts, or --masks-hist with --masks-pred")
        if cfg.detector == "external_mask_file":
            raise _Failure("the external_mask_file detector needs --masks-hist/--masks-pred")
        rows = _evaluate_forecasts(args, cfg, tcs_cfg, det_cfg)
        detector = cfg.detector
    header = {
        "config": {
            "sigma": cfg.tcs_sigma, "beta": cfg.tcs_beta, "epsilon": cfg.tcs_epsilon,
            "empty_mask_policy": cfg.empty_mask_policy, "detector": detector,
            "detector_tau": cfg.detector_tau, "morphology": cfg.morphology,
        },
        **_provenance(cfg, args.seed),
    }
    doc = write_report(rows, args.report, header) if args.report else None
    if doc is None:
        from .sits_io import build_report, dumps_json

        sys.stdout.write(dumps_json(build_report(rows, header)))
    else:
        agg = doc["aggregate"]
        mean_tcs = agg["mean_tcs"] if agg else None
        print(f"evaluated {len(rows)} sequences, mean TCS {mean_tcs}, report {args.report}")
    return EXIT_OK


# -- gradcheck -------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .gradcheck_suites import SUITES, run_suites

    names = list(SUITES) if args.module == "all" else [
        n for n, (module, _) in SUITES.items() if module == args.module
    ]
    results = run_suites(names, seed=args.seed, configs=args.configs)
    ok = True
    print(f"{'component':<16} {'configs':>7} {'max_rel_err':>12}  worst parameter")
    for name, res in results.items():
        ok &= res.passed
        flag = "ok" if res.passed else "FAIL"
        print(f"{name:<16} {res.configs:>7} {res.max_rel_error:>12.3e}  {res.worst_param}  {flag}")
    print("all components pass" if ok else "gradient check FAILED")
    return EXIT_OK if ok else EXIT_FAIL


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .sits_io import SCENARIOS

    p = argparse.ArgumentParser(prog="sitsforecast", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic image time series dataset")
    s.add_argument("--scenario", choices=SCENARIOS, required=True)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--frames", type=int, default=4)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--noise", type=float, default=0.02, help="per-pixel noise amplitude")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser(
        "train", help="run one training stage",
        description="Stage 0 pretrains the U-Net, 1 trains the structural control path, "
                    "2 and 3 train the semantic/temporal parameters (3 with cosine decay). "
                    "The contrastive_weight config key is accepted but has no effect.",
    )
    t.add_argument("--stage", type=int, choices=(0, 1, 2, 3), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--checkpoint-in")
    t.add_argument("--checkpoint-out", required=True)
    t.add_argument("--report")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("forecast", help="sample the next frame of every sequence")
    f.add_argument("--data", required=True)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--config")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.add_argument("--mode", choices=("full", "structural"), default="full",
                   help="'structural' switches the semantic path off")
    f.set_defaults(func=cmd_forecast)

    e = sub.add_parser("evaluate", help="temporal consistency, PSNR and SSIM report")
    e.add_argument("--data")
    e.add_argument("--forecasts")
    e.add_argument("--masks-hist")
    e.add_argument("--masks-pred")
    e.add_argument("--detector", choices=DETECTORS)
    e.add_argument("--config")
    e.add_argument("--report")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gradcheck", help="finite-difference verification of every backward kernel")
    g.add_argument("--module", choices=("numeric_core", "tam", "sfci", "diffusion", "all"), default="all")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--configs", type=int, default=20, help="random configurations per component")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (_Failure, SitsForecastError, OSError) as exc:
        print(f"sitsforecast {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_exit()
