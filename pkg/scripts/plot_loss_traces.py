#!/usr/bin/env python3
"""
Plot per-level clustering loss traces

Reads the loss_trace.csv written by `htscluster cluster` and draws one panel per
hierarchy level, so a rising step (which should never happen) is easy to spot.

Usage:
    python plot_loss_traces.py --trace runs/fit/loss_trace.csv --out loss_traces.png
    python plot_loss_traces.py --trace a/loss_trace.csv b/loss_trace.csv --labels seed0 seed1

Requirements:
    pip install matplotlib pandas
"""

import matplotlib
matplotlib.use('Agg')  # headless
import matplotlib.pyplot as plt
import pandas as pd
import argparse
import os
import sys


def load_trace(filepath, label):
    """Load a loss trace CSV and tag it with a run label"""
    if not os.path.exists(filepath):
        print(f"Error: {filepath} not found")
        return None
    df = pd.read_csv(filepath)
    missing = {'level', 'iteration', 'loss'} - set(df.columns)
    if missing:
        print(f"Error: {filepath} lacks columns {sorted(missing)}")
        return None
    df['run'] = label
    return df


def rising_steps(df, slack=1e-10):
    """Rows where the loss went up by more than slack"""
    out = []
    for (run, level), group in df.groupby(['run', 'level']):
        diffs = group['loss'].diff().fillna(0.0)
        for it, d in zip(group['iteration'], diffs):
            if d > slack:
                out.append((run, level, it, d))
    return out


def plot_traces(traces, output_file, log_scale):
    levels = sorted(traces['level'].unique())
    fig, axes = plt.subplots(len(levels), 1, figsize=(10, 3.2 * len(levels)), squeeze=False)
    fig.suptitle('Clustering loss per level', fontsize=14, fontweight='bold')

    for ax, level in zip(axes[:, 0], levels):
        subset = traces[traces['level'] == level]
        for run, group in subset.groupby('run'):
            ax.plot(group['iteration'], group['loss'], marker='o', markersize=3, linewidth=1.5, label=run)
        ax.set_title(f'Level {level}')
        ax.set_xlabel('Trace step (assignment / centering)')
        ax.set_ylabel('Loss')
        if log_scale:
            ax.set_yscale('symlog')
        ax.grid(True, alpha=0.3)
        if subset['run'].nunique() > 1:
            ax.legend()

    plt.tight_layout()
    plt.savefig(output_file, dpi=150, bbox_inches='tight')
    print(f"Loss trace plot saved to: {output_file}")


def main():
    parser = argparse.ArgumentParser(
        description='Plot htscluster loss traces',
        formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument('--trace', nargs='+', required=True,
                        help='One or more loss_trace.csv files')
    parser.add_argument('--labels', nargs='+', default=None,
                        help='Run labels, one per trace (default: file paths)')
    parser.add_argument('--out', '-o', default='loss_traces.png',
                        help='Output image (default: loss_traces.png)')
    parser.add_argument('--log', action='store_true', help='Symmetric log scale on the loss axis')

    args = parser.parse_args()
    labels = args.labels or args.trace
    if len(labels) != len(args.trace):
        print("Error: --labels needs one entry per --trace file")
        sys.exit(1)

    print("Loss trace report")
    print("=" * 50)

    frames = [load_trace(path, label) for path, label in zip(args.trace, labels)]
    frames = [f for f in frames if f is not None]
    if not frames:
        print("Error: No valid trace data found")
        sys.exit(1)
    traces = pd.concat(frames, ignore_index=True)

    for (run, level), group in traces.groupby(['run', 'level']):
        print(f"{run} level {level}: {len(group)} steps, "
              f"loss {group['loss'].iloc[0]:.6g} -> {group['loss'].iloc[-1]:.6g}")

    bad = rising_steps(traces)
    if bad:
        print("\nWARNING: loss increased at")
        for run, level, it, d in bad:
            print(f"  {run} level {level} step {it}: +{d:.3g}")

    plot_traces(traces, args.out, args.log)
    sys.exit(1 if bad else 0)


if __name__ == '__main__':
    main()
