"""Print the table and expectation of every report.json under a runs directory."""

import argparse
from pathlib import Path

from realign.evaluation import EvalReport


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("root", nargs="?", default="runs")
    args = parser.parse_args()
    paths = sorted(Path(args.root).glob("**/report.json"))
    if not paths:
        raise SystemExit(f"no report.json under {args.root}")
    for path in paths:
        report = EvalReport.load(path)
        print(f"== {report.experiment_id} ({path.parent})")
        print(report.format_table())
        exp = report.metadata.get("expectation")
        if exp:
            print(f"expectation: {exp.get('expected')} -> satisfied={exp.get('satisfied')}")
        if "relative_drop" in report.metadata:
            print("relative drop: " + ", ".join(f"{d:.3f}" for d in report.metadata["relative_drop"]))
        print()


if __name__ == "__main__":
    main()
