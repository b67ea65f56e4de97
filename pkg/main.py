"""
Folded Attention verification harness.

Usage:
    python main.py equivalence|gradcheck|cost|bench|all [options]

Exit codes: 0 when every gating check passes, 1 when a check fails,
2 when the configuration is rejected or a size guard refuses the shape.
"""

import argparse
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from src.cost_model import ShapeSpec
from src.errors import ConfigurationError, GuardExceededError, MemoryBudgetError
from src.harness import COMMANDS, RunConfig, overall_passed, run, write_report
from src.utils import configure_logging, get_config, print_error_help, print_setup_instructions

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_REJECTED = 2


def _int_list(text: str):
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fa",
        description="Certify folded attention: oracle equivalence, gradients, cost model, timings.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument(
        "--shape",
        default="2,3,2,3",
        help="H,W,D,C with the channel axis last (a channel-first 64x32x32x32 tensor is 32,32,32,64)",
    )
    parser.add_argument("--trials", type=int, default=20)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--out", type=Path, default=None, help="report path (cost: table path)")
    parser.add_argument("--format", choices=("json", "csv"), default="json")
    parser.add_argument("--reapply-g", action="store_true", help="apply g before every aggregation stage")
    parser.add_argument("--rtol", type=float, default=1e-4, help="gradient check relative tolerance")
    parser.add_argument("--atol", type=float, default=1e-10, help="equivalence absolute tolerance")
    parser.add_argument("--budget-bytes", type=int, default=None, help="override FA_MEM_BUDGET_BYTES")
    parser.add_argument("--sizes", type=_int_list, default=(4, 8, 16, 32), help="equal-dims sweep for cost")
    parser.add_argument("--verbose", "-v", action="store_true")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """Validate command-line arguments into a RunConfig."""
    shape = ShapeSpec.parse(args.shape)
    return RunConfig(
        command=args.command,
        shape=shape.dims,
        trials=args.trials,
        seed=args.seed,
        atol=args.atol,
        rtol=args.rtol,
        out=args.out,
        format=args.format,
        reapply_g=args.reapply_g,
        budget_bytes=args.budget_bytes,
        sizes=args.sizes,
    )


def print_summary(reports) -> None:
    for report in reports:
        print(f"\n🔬 {report.suite}")
        print("-" * 50)
        for check in report.checks:
            if not check.gating:
                mark = "⏱️ "
            else:
                mark = "✅" if check.passed else "❌"
            print(f"   {mark} {check.name:<24} metric={check.metric:.3e}  {check.seconds:.2f}s")
            if "refused" in check.detail:
                print("      refused: memory budget")
            if "skipped" in check.detail:
                print(f"      skipped: {check.detail['skipped']}")
            for key, value in check.detail.items():
                if key.endswith("_pct"):
                    print(f"      {key[:-4]:<22} {value:.4f}%")
        for name, path in report.artifacts.items():
            print(f"   📄 {name}: {path}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging("DEBUG" if args.verbose else None)
    logger = logging.getLogger("fa")

    config = get_config()
    if not config.validate():
        print("❌ Invalid configuration:", ", ".join(config.get_invalid_config()))
        print_setup_instructions()
        return EXIT_REJECTED

    try:
        cfg = config_from_args(args)
    except (ConfigurationError, ValidationError) as e:
        print(f"❌ Invalid arguments: {e}")
        return EXIT_REJECTED

    print(f"Folded Attention: {cfg.command}")
    print("=" * 50)
    print(f"   shape={cfg.shape} trials={cfg.trials} seed={cfg.seed} reapply_g={cfg.reapply_g}")

    try:
        reports = run(cfg)
    except (ConfigurationError, GuardExceededError, MemoryBudgetError) as e:
        print_error_help(e)
        return EXIT_REJECTED

    print_summary(reports)
    if cfg.out is not None and cfg.command != "cost":
        path = write_report(reports, cfg)
        print(f"\n📄 Report written to {path}")

    passed = overall_passed(reports)
    print("\n" + "=" * 50)
    if passed:
        print("🎉 All checks passed")
    else:
        failed = [f"{r.suite}/{c.name}" for r in reports for c in r.checks if c.gating and not c.passed]
        print(f"❌ Failed checks: {', '.join(failed)}")
    print("=" * 50)
    logger.debug("exit verdict %s", passed)
    return EXIT_OK if passed else EXIT_FAILED


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n\nInterrupted")
        sys.exit(EXIT_FAILED)
