import argparse
import logging
import os
import sys

from dotenv import load_dotenv

from constants.defaults import LOG_FILE_NAME, REPORT_DIR_NAME
from utils.ablation import run_ablation
from utils.config import load_config, parse_assignments
from utils.csv_utility import CSVUtility
from utils.errors import GaussianMappingError
from utils.file_utility import FileUtility
from utils.pipeline import (
    run_distill, run_eval, run_init, run_mine, run_pipeline, run_render, run_synth, run_train_env,
)

logger = logging.getLogger(__name__)


def setup_logging(log_file, level="INFO"):
    """Configure logging settings"""
    FileUtility.ensure_directory_exists(os.path.dirname(os.path.abspath(log_file)))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_file),
            logging.StreamHandler()
        ],
        force=True
    )


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="KEY=VALUE configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--dataset-dir")
    common.add_argument("--output-dir")
    common.add_argument("--steps", type=int, help="training steps of the selected stage")
    common.add_argument("--workers", type=int)
    common.add_argument("--log-level", default="INFO")

    parser = argparse.ArgumentParser(description="Multitraverse Gaussian mapping pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="generate a synthetic multitraverse dataset")
    synth.set_defaults(seed_required=True)
    sub.add_parser("init", parents=[common], help="stage 1: initial map from seed points")
    sub.add_parser("distill", parents=[common], help="stage 2: feature distillation and residuals")
    sub.add_parser("mine", parents=[common], help="stage 2: ephemerality masks from residuals")
    sub.add_parser("train-env", parents=[common], help="stage 3: masked environment training")
    render = sub.add_parser("render", parents=[common], help="render every dataset frame from a map")
    render.add_argument("--map", help="PLY map to render (defaults to the latest stage output)")
    sub.add_parser("eval", parents=[common], help="metrics against ground truth")
    sub.add_parser("run", parents=[common], help="run every enabled stage")

    ablate = sub.add_parser("ablate", parents=[common], help="sweep one axis on synthetic scenes")
    ablate.add_argument("--axis", required=True, choices=["traversals", "feat_dim", "feat_res", "distill_steps"])
    ablate.add_argument("--values", required=True, nargs="+")
    ablate.add_argument("--out", help="CSV table (default: <output>/reports/ablation_<axis>.csv)")

    plot = sub.add_parser("plot", parents=[common], help="plot a metric column of an ablation table")
    plot.add_argument("--table", required=True)
    plot.add_argument("--metric", default="iou")
    plot.add_argument("--out", required=True)
    return parser


def resolve_config(args):
    overrides = parse_assignments(args.set)
    for key, value in (("SEED", args.seed), ("DATASET_DIR", args.dataset_dir),
                       ("OUTPUT_DIR", args.output_dir), ("WORKERS", args.workers)):
        if value is not None:
            overrides[key] = str(value)
    if args.steps is not None:
        overrides["ENV_STEPS" if args.command == "train-env" else "DISTILL_STEPS"] = str(args.steps)
    return load_config(args.config, overrides)


def dispatch(args, cfg):
    if args.command == "synth":
        return run_synth(cfg)
    if args.command == "init":
        return run_init(cfg)
    if args.command == "distill":
        return run_distill(cfg)
    if args.command == "mine":
        return run_mine(cfg)
    if args.command == "train-env":
        return run_train_env(cfg)
    if args.command == "render":
        return run_render(cfg, args.map)
    if args.command == "eval":
        return run_eval(cfg)
    if args.command == "run":
        return run_pipeline(cfg)
    if args.command == "ablate":
        table = run_ablation(cfg.synth, args.axis, args.values, cfg.training_settings(), cfg.mining,
                             cfg.distill_steps, cfg.progress)
        out = args.out or os.path.join(cfg.output_dir, REPORT_DIR_NAME, f"ablation_{args.axis}.csv")
        CSVUtility.write_table(table, out)
        CSVUtility.append_jsonl(table.to_dict(orient="records"), os.path.splitext(out)[0] + ".jsonl")
        return out
    if args.command == "plot":
        CSVUtility.plot_metric_curve(args.table, args.metric, args.out)
        return args.out


def main(argv=None):
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed_required", False) and args.seed is None:
        parser.error("synth requires --seed")

    output_dir = args.output_dir or os.getenv("GMAP_OUTPUT_DIR", "output")
    setup_logging(os.path.join(output_dir, LOG_FILE_NAME), args.log_level)
    try:
        cfg = resolve_config(args)
        result = dispatch(args, cfg)
        logger.info(f"{args.command} finished: {result}")
        return 0
    except GaussianMappingError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    except Exception:
        logger.exception(f"Unexpected error in {args.command}")
        raise


if __name__ == "__main__":
    sys.exit(main())
