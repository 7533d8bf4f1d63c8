"""Modality ablation: which auxiliary views the alignment stage sees.

Rows are the LINE pre-encoding alone (no alignment), then alignment with
each single modality, each pair, and all three.
"""

import argparse
import itertools
import logging

import numpy as np

from mobalign import align, graphbuild, line, probe, synth
from mobalign.pipeline import PipelineConfig


def restrict(data: align.ModalityData, keep) -> align.ModalityData:
    masks = {m: (data.masks[m] if m in keep else np.zeros_like(data.masks[m])) for m in align.MODALITIES}
    return align.ModalityData(data.cells, data.features, masks)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trials", type=int, default=10)
    args = ap.parse_args()
    # dropping views is the point here, so the per-run warning is noise
    logging.getLogger("mobalign.align").setLevel(logging.ERROR)

    cfg = PipelineConfig().with_seed(args.seed)
    data = synth.generate(cfg.synth)
    full = graphbuild.build_graph(data.events)
    sub = graphbuild.sample(full, cfg.graph.ratio, cfg.graph.mode, cfg.graph.seed)
    init = line.train_line(full, cfg.line)
    names = [t.name for t in data.tasks]

    def row(label, table):
        r2 = {r.task: r.r2_mean for r in probe.run_benchmark(table, data.tasks, args.trials)}
        print(f"{label}\t" + "\t".join(f"{r2[n]:.3f}" for n in names), flush=True)

    print("views\t" + "\t".join(names))
    row("line-only", init)
    for k in (1, 2, 3):
        for keep in itertools.combinations(align.MODALITIES, k):
            res = align.train_align(sub, init, restrict(data.modalities, keep), cfg.align)
            row("+".join(keep), res.embeddings)


if __name__ == "__main__":
    main()
