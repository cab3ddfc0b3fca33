"""Run the full toy pipeline (data, expert, teacher, students, quantization, evaluation).

Stages are cached in the work directory, so re-running resumes where it stopped.

    python scripts/run_pipeline.py [--workdir DIR] [--no-ablation]
"""

import argparse
import json

from tfcompress.metrics import MetricsReport, reports_to_csv
from tfcompress.pipeline import Pipeline, PipelineConfig, default_workdir


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default=None)
    ap.add_argument("--no-ablation", action="store_true", help="train only the seed-0 KD student")
    args = ap.parse_args()
    cfg = PipelineConfig()
    pipe = Pipeline(args.workdir or default_workdir(cfg), cfg)
    print(f"work directory: {pipe.dir}")
    summary = pipe.run_all(ablation=not args.no_ablation)
    print(reports_to_csv([MetricsReport.from_record(r) for r in summary["reports"]]))
    print(json.dumps(summary["stage_times"], indent=1))


if __name__ == "__main__":
    main()
