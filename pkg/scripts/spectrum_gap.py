"""Lowest eigenvalues of one element's local pencil and the share of them that
are discrete gradients (zero curl energy).

    python scripts/spectrum_gap.py --n-fine-per-coarse 4 --count 140
"""
import argparse

import numpy as np
import scipy.linalg as sla

from cemaxwell.assembly import assemble_operators
from cemaxwell.coeff import ModelSpec, generate
from cemaxwell.mesh import build_nested_mesh, coarse_element


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--n-coarse", type=int, default=3)
    p.add_argument("--n-fine-per-coarse", type=int, default=4)
    p.add_argument("--k", type=float, default=4.0)
    p.add_argument("--count", type=int, default=140)
    args = p.parse_args()

    mesh = build_nested_mesh(args.n_coarse, args.n_fine_per_coarse)
    c = args.n_coarse // 2
    region = coarse_element(mesh, mesh.coarse_index(c, c, c))
    ops = assemble_operators(mesh, generate(ModelSpec(), mesh), region, args.k)
    n = min(args.count, ops.n)
    vals, vecs = sla.eigh(ops.a_matrix().toarray(), ops.S.toarray(), subset_by_index=[0, n - 1])
    curl = np.einsum("ij,ij->j", vecs, ops.K @ vecs)
    flat = curl <= 1e-10 * vals
    print(f"element of {ops.n} edges, k^2 H^2 mu = {args.k**2 * mesh.H**2:.6g}")
    print(f"{flat.sum()} of the lowest {n} modes are curl-free")
    for j in range(n):
        print(f"{j:4d} {vals[j]:.10e} {'gradient' if flat[j] else ''}")


if __name__ == "__main__":
    main()
