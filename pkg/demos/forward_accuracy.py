"""Compare the five source models against the analytic homogeneous-sphere potential.

Run with ``python demos/forward_accuracy.py [refinement]``.  Refinement 2 takes
well under a minute; refinement 3 takes a few minutes.
"""
import sys

import numpy as np

from fwdinv.fem import assemble_stiffness, cap_electrodes, compute_transfer_matrix
from fwdinv.mesh import LayeredSphereSpec, build_layered_sphere_mesh
from fwdinv.sources import SOURCE_MODELS, Dipole, build_rhs
from fwdinv.sphere import layered_sphere_potential, mag, rdm

RADIUS, SIGMA = 92.0, 0.33


def main(refinement=2, n_dipoles=10, seed=0):
    mesh = build_layered_sphere_mesh(LayeredSphereSpec((RADIUS,), (SIGMA,), refinement=refinement))
    electrodes = cap_electrodes(mesh, 60)
    tm = compute_transfer_matrix(assemble_stiffness(mesh), electrodes, 1e-9)
    print(f"mesh: {mesh.n_vertices} vertices, {mesh.n_elements} tetrahedra")

    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_dipoles, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    positions = dirs * RADIUS * rng.uniform(0.1, 0.8, (n_dipoles, 1))
    moments = rng.normal(size=(n_dipoles, 3))

    print(f"{'model':<12} {'mean RDM':>9} {'max RDM':>8} {'max |lnMAG|':>12}")
    for model in SOURCE_MODELS:
        kw = {"electrodes": electrodes} if model == "localsub" else {}
        rd, lm = [], []
        for p, q in zip(positions, moments):
            load = build_rhs(mesh, Dipole(p, q), model, **kw)
            v = tm.readout(load.dense(mesh.n_vertices))
            ref = layered_sphere_potential(electrodes.positions, p, q, (RADIUS,), (SIGMA,))
            ref -= ref.mean()
            rd.append(rdm(v, ref))
            lm.append(abs(np.log(mag(v, ref))))
        print(f"{model:<12} {np.mean(rd):9.4f} {np.max(rd):8.4f} {np.max(lm):12.4f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 2)
