#!/usr/bin/env python3
"""
Compare clustered forecasting against per-series forecasting

Reads the timing.json and timing_per_series.json written by
`htscluster forecast --baseline per-series` and reports fit counts, wall time and
per-level MASE side by side, with a bar chart of both.

Usage:
    python compare_forecast_timing.py --run runs/forecast --out forecast_comparison.png

Requirements:
    pip install matplotlib pandas
"""

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import pandas as pd
import argparse
import json
import os
import sys


def load_timing(filepath, label):
    if not os.path.exists(filepath):
        print(f"Error: {filepath} not found")
        return None
    with open(filepath) as fh:
        body = json.load(fh)
    body['pipeline'] = label
    return body


def mase_frame(runs):
    rows = []
    for run in runs:
        for level, value in enumerate(run['mase_per_level'], start=1):
            rows.append({'pipeline': run['pipeline'], 'level': level, 'mase': value})
    return pd.DataFrame(rows)


def create_comparison_plot(runs, output_file):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(14, 5))
    names = [r['pipeline'] for r in runs]
    colors = ['#2E86AB', '#E94F37']

    ax1.bar(names, [r['fits'] for r in runs], color=colors[:len(runs)])
    ax1.set_title('Forecaster fits')
    ax1.set_ylabel('Fits')
    ax1.grid(True, axis='y', alpha=0.3)

    frame = mase_frame(runs).dropna()
    pivot = frame.pivot(index='level', columns='pipeline', values='mase')
    pivot.plot(kind='bar', ax=ax2, color=colors[:len(pivot.columns)])
    ax2.set_title('MASE per level')
    ax2.set_xlabel('Level')
    ax2.set_ylabel('MASE')
    ax2.grid(True, axis='y', alpha=0.3)

    plt.tight_layout()
    plt.savefig(output_file, dpi=150, bbox_inches='tight')
    print(f"Comparison plot saved to: {output_file}")


def main():
    parser = argparse.ArgumentParser(
        description='Compare clustered and per-series forecasting runs',
        formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument('--run', required=True,
                        help='Output directory of htscluster forecast --baseline per-series')
    parser.add_argument('--out', '-o', default='forecast_comparison.png',
                        help='Output file for the plot (default: forecast_comparison.png)')
    args = parser.parse_args()

    print("Clustered vs per-series forecasting")
    print("=" * 50)

    clustered = load_timing(os.path.join(args.run, 'timing.json'), 'clustered')
    direct = load_timing(os.path.join(args.run, 'timing_per_series.json'), 'per-series')
    if clustered is None or direct is None:
        print("Error: both timing files are needed")
        sys.exit(1)
    runs = [clustered, direct]

    print(f"{'':12}{'fits':>10}{'wall ms':>12}")
    for r in runs:
        print(f"{r['pipeline']:12}{r['fits']:>10}{r['wall_ms']:>12}")
    print(f"\nFit ratio:  {clustered['fits'] / max(direct['fits'], 1):.3f}")
    print(f"Time ratio: {clustered['wall_ms'] / max(direct['wall_ms'], 1):.3f}")

    print("\nMASE per level")
    for level, (a, b) in enumerate(zip(clustered['mase_per_level'], direct['mase_per_level']), start=1):
        if a is None or b is None:
            print(f"  level {level}: undefined")
            continue
        print(f"  level {level}: clustered {a:.4f}  per-series {b:.4f}  ratio {a / b:.3f}")

    create_comparison_plot(runs, args.out)


if __name__ == '__main__':
    main()
