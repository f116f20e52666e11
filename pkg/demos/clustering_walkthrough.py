"""Walkthrough: cluster synthetic frame embeddings and draw a stratified sample.

Generates three well-separated Gaussian blobs standing in for CLIP-style
frame embeddings, clusters them with the density-based clusterer, then
picks one representative frame per cluster. No network or files needed.

Run: python3 demos/clustering_walkthrough.py
"""

import numpy as np

from vivecap.embedding_sampler import (
    ClusteringParams,
    EmbeddingMatrix,
    hdbscan_cluster,
    pca_project_2d,
    stratified_sample,
)


def main():
    rng = np.random.default_rng(0)
    centers = [(0.0, 0.0, 0.0), (20.0, 0.0, 0.0), (0.0, 20.0, 20.0)]
    vectors = np.vstack([rng.normal(c, 0.8, (40, 3)) for c in centers]).astype(np.float32)
    ids = [f"frame_{i:04d}" for i in range(len(vectors))]
    emb = EmbeddingMatrix(ids=ids, vectors=vectors)

    params = ClusteringParams(min_cluster_size=5, min_samples=5, metric="euclidean_raw")
    assignment = hdbscan_cluster(emb, params)
    print(f"found {assignment.n_clusters} clusters over {emb.n} frames")
    for cid in sorted(assignment.stabilities):
        members = int((assignment.labels == cid).sum())
        print(f"  cluster {cid}: {members} frames, stability {assignment.stabilities[cid]:.2f}")

    sample = stratified_sample(emb, assignment, strategy="seeded_random", seed=42)
    share = 100.0 * len(sample.chosen) / emb.n
    print(f"\nsampled one frame per cluster ({share:.2f}% of the corpus):")
    for cid, fid in sorted(sample.chosen.items()):
        print(f"  cluster {cid} -> {fid}")

    proj = pca_project_2d(emb)
    print("\n2-D projection of each sampled frame (for plotting):")
    for cid, fid in sorted(sample.chosen.items()):
        x, y = proj[ids.index(fid)]
        print(f"  {fid}: ({x:+.2f}, {y:+.2f})")


if __name__ == "__main__":
    main()
