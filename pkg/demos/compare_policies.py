"""Run the shipped experiment configs and print the comparison tables.

    python3 demos/compare_policies.py [outdir]
"""
import sys
from pathlib import Path

from secinfer.harness.report import compare
from secinfer.harness.simulate import run_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main(out="demo-out"):
    out = Path(out)
    for name in ("microbench", "fnpacker", "mmpp"):
        outputs = run_config(CONFIGS / f"{name}.yaml", out_dir=out / name)
        table, _ = compare([out / name])
        print(f"== {name}")
        print(table)
        if name == "fnpacker":
            for o in outputs:
                s = o.summary["by_group"]["session1"]["paths"]
                print(f"  {o.name}: session1 cold={s['cold']} stream mean="
                      f"{o.summary['ungrouped_latency']['mean_ms']:.1f} ms")
        if name == "mmpp":
            for o in outputs:
                b = o.summary["burst"]
                print(f"  {o.name}: burst recovered={b['recovered']} peak p95={b['peak_p95_ms']:.0f} ms")
        print()


if __name__ == "__main__":
    main(*sys.argv[1:])
