"""
Desk-scale comparison of baseline and adversarial training.

For each seed: generate the four-domain phantom dataset, train a baseline and an adversarial
model with the same epoch schedule, evaluate both on the test split and probe their bottleneck features
on the training domains. Prints the per-seed numbers and the medians, checks the directional
claims and the wall-time budget, and writes the table to docs/DESK-RESULTS.md. Exits 1 when a
check fails.

The default of 60 phantoms per domain targets three seeds inside 15 minutes on a desktop CPU;
at 100 per domain one seed took about 6.5 minutes.

    python scripts/desk_experiment.py --work runs/desk --seeds 0 1 2
"""
import argparse
import json
import logging
import os
import statistics
import sys
import time

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, REPO_ROOT)

from app import main as run_cli  # noqa: E402

logger = logging.getLogger("desk_experiment")

TRAIN_DOMAINS = ("A", "B")
UNSEEN_DOMAIN = "D"
PROBE_DOMAINS = "A,B,C"
FOREGROUND = ("lv", "myo", "rv")
MODES = ("baseline", "adversarial")


def _run(argv):
    code = run_cli(argv)
    if code != 0:
        raise SystemExit(f"command failed with exit code {code}: {' '.join(argv)}")


def _foreground_dice(aggregates: dict, domain: str) -> float:
    return statistics.mean(aggregates[domain][f"dice_{name}"]["mean"] for name in FOREGROUND)


def run_seed(work: str, seed: int, per_domain: int) -> dict:
    root = os.path.join(work, f"seed_{seed}")
    data = os.path.join(root, "data")
    _run(["generate", "--out", data, "--per-domain", str(per_domain), "--seed", str(seed), "--force"])

    results = {}
    for mode in MODES:
        train_dir = os.path.join(root, mode)
        _run(["train", "--data", data, "--mode", mode, "--seed", str(seed), "--out", train_dir, "--force"])
        model = os.path.join(train_dir, "model.ckpt")
        eval_dir = os.path.join(root, f"{mode}_eval")
        _run(["eval", "--data", data, "--checkpoint", model, "--out", eval_dir, "--force"])
        probe_dir = os.path.join(root, f"{mode}_probe")
        _run(["probe", "--data", data, "--checkpoint", model, "--out", probe_dir, "--domains", PROBE_DOMAINS,
              "--seed", str(seed), "--force"])

        with open(os.path.join(eval_dir, "metrics.json")) as f:
            aggregates = json.load(f)["aggregates"]
        with open(os.path.join(probe_dir, "probe.json")) as f:
            probe = json.load(f)
        train_dice = statistics.mean(_foreground_dice(aggregates, d) for d in TRAIN_DOMAINS)
        unseen_dice = _foreground_dice(aggregates, UNSEEN_DOMAIN)
        results[mode] = {
            "unseen_dice": unseen_dice,
            "gap": train_dice - unseen_dice,
            "probe_accuracy": probe["accuracy"],
            "chance": probe["chance"],
        }
        logger.info(f"seed={seed} mode={mode} {results[mode]}")
    return results


def _table(summary: dict, per_seed: list, checks: dict, minutes: float, per_domain: int) -> str:
    lines = [
        "# Desk Experiment Results",
        "",
        f"Written by `scripts/desk_experiment.py`: {len(per_seed)} seeds, {per_domain} phantoms per domain, "
        f"{minutes:.1f} min wall time.",
        "",
        "| seed | mode | unseen Dice (D) | train-to-unseen gap | probe accuracy | chance |",
        "|------|------|-----------------|---------------------|----------------|--------|",
    ]
    rows = [(r["seed"], mode, r[mode]) for r in per_seed for mode in MODES]
    rows += [("median", mode, summary[mode]) for mode in MODES]
    for seed, mode, values in rows:
        lines.append(
            f"| {seed} | {mode} | {values['unseen_dice']:.3f} | {values['gap']:.3f} | "
            f"{values['probe_accuracy']:.3f} | {values['chance']:.3f} |"
        )
    lines += ["", "| check | result |", "|-------|--------|"]
    lines += [f"| {name} | {'PASS' if passed else 'FAIL'} |" for name, passed in checks.items()]
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument("--work", default="runs/desk", help="working directory for all runs")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--per-domain", type=int, default=60)
    parser.add_argument("--budget-min", type=float, default=15.0, help="wall-time budget in minutes")
    parser.add_argument("--report", default=os.path.join(REPO_ROOT, "docs", "DESK-RESULTS.md"),
                        help="markdown file for the result table")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO)

    started = time.perf_counter()
    per_seed = [{"seed": seed, **run_seed(args.work, seed, args.per_domain)} for seed in args.seeds]
    minutes = (time.perf_counter() - started) / 60.0

    summary = {}
    for mode in MODES:
        summary[mode] = {
            key: statistics.median(r[mode][key] for r in per_seed)
            for key in ("unseen_dice", "gap", "probe_accuracy", "chance")
        }

    base, adv = summary["baseline"], summary["adversarial"]
    checks = {
        "unseen-domain Dice: adversarial >= baseline": adv["unseen_dice"] >= base["unseen_dice"],
        "train-to-unseen gap: adversarial <= baseline": adv["gap"] <= base["gap"],
        "probe accuracy: adversarial <= baseline": adv["probe_accuracy"] <= base["probe_accuracy"],
        "probe accuracy within 15 points of chance": abs(adv["probe_accuracy"] - adv["chance"]) <= 0.15,
        f"wall time <= {args.budget_min:g} min": minutes <= args.budget_min,
    }
    print(json.dumps({"median": summary, "per_seed": per_seed, "minutes": minutes}, indent=2))
    for name, passed in checks.items():
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
    with open(os.path.join(args.work, "summary.json"), "w") as f:
        json.dump({"median": summary, "per_seed": per_seed, "checks": checks, "minutes": minutes}, f, indent=2)
    os.makedirs(os.path.dirname(os.path.abspath(args.report)), exist_ok=True)
    with open(args.report, "w") as f:
        f.write(_table(summary, per_seed, checks, minutes, args.per_domain))
    logger.info(f"Wrote result table to {args.report}")
    return 0 if all(checks.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
