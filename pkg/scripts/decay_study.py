"""Localization study: distance of T_{i,m} phi from the global T_i phi over m.

Writes one CSV row per (medium, mode, m).  The central element of the coarse
grid is used; pick n_coarse large enough that the largest m does not cover
the whole domain, otherwise the last rows are round-off.
"""
import argparse
import csv

from cemaxwell import cem
from cemaxwell.coeff import ModelKind, ModelSpec, generate
from cemaxwell.mesh import build_nested_mesh


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--n-coarse", type=int, default=8)
    p.add_argument("--n-fine-per-coarse", type=int, default=2)
    p.add_argument("--k", type=float, default=4.0)
    p.add_argument("--l", type=int, default=4)
    p.add_argument("--m", type=int, nargs="*", default=[1, 2, 3])
    p.add_argument("--modes", type=int, default=1)
    p.add_argument("--out", default="decay_study.csv")
    args = p.parse_args()

    mesh = build_nested_mesh(args.n_coarse, args.n_fine_per_coarse)
    c = (args.n_coarse - 1) // 2
    i = mesh.coarse_index(c, c, c)
    media = {
        "homogeneous": ModelSpec(),
        "rods_1e3": ModelSpec(kind=ModelKind.PERIODIC_RODS, inclusion_value=1e3),
    }
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["medium", "mode", "m", "err_a", "err_pi_s", "Lambda"])
        for name, spec in media.items():
            fld = generate(spec, mesh)
            aux = cem.compute_auxiliary(mesh, fld, args.k, args.l)
            for j in range(args.modes):
                for m, ea, es in cem.decay_profile(mesh, fld, args.k, mesh.H, aux, i, j, args.m):
                    w.writerow([name, j, m, f"{ea:.6e}", f"{es:.6e}", f"{aux.Lambda:.6e}"])
                    print(f"{name:12s} mode {j} m={m}: {ea:.3e} {es:.3e}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
