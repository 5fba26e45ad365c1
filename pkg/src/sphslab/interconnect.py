"""Power-preserving feedback composition of explicit I-S-O (S)PHS models.

Two models are coupled port-by-port through the gyrative feedback

    u_A = -s * y_B + e_A,      u_B = +s * y_A + e_B,

which transfers power losslessly: the coupled-port powers cancel
exactly.  In closed form the composite is again a (S)PHS on the stacked
state with H = H_A + H_B, block-diagonal R and xi, and

    J = [[J_A,            -g_A^c S (g_B^c)^T],
         [g_B^c S (g_A^c)^T,            J_B]]

where g^c are the coupled port columns and S = diag(signs).  External
efforts e on coupled ports default to zero (pure feedback); set
``reexport_coupled`` to re-export them as new control ports.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import EnergyFunction, SPHSModel, StructureField
from .errors import ConfigurationError

Array = np.ndarray


@dataclass(frozen=True)
class Coupling:
    """Port pairs (a_port, b_port, sign) with sign in {+1, -1}."""

    pairs: tuple = ()
    reexport_coupled: bool = False

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(tuple(p) for p in self.pairs))
        for p in self.pairs:
            if len(p) != 3 or p[2] not in (1, -1):
                raise ConfigurationError(f"coupling pair {p} must be (a_port, b_port, +-1)")
        for which in (0, 1):
            ports = [p[which] for p in self.pairs]
            if len(ports) != len(set(ports)):
                raise ConfigurationError("a port may be coupled at most once")


def _batch_shape(*arrays):
    return np.broadcast_shapes(*[a.shape[:-2] for a in arrays])


def _block2(tl, tr, bl, br):
    """Assemble a 2x2 block matrix, broadcasting over leading batch axes."""
    batch = _batch_shape(tl, tr, bl, br)
    nA = tl.shape[-1]
    nB = br.shape[-1]
    rB = bl.shape[-2]
    out = np.zeros(batch + (tl.shape[-2] + rB, nA + nB))
    out[..., : tl.shape[-2], :nA] = tl
    out[..., : tl.shape[-2], nA:] = tr
    out[..., tl.shape[-2] :, :nA] = bl
    out[..., tl.shape[-2] :, nA:] = br
    return out


def compose(A: SPHSModel, B: SPHSModel, coupling: Coupling) -> SPHSModel:
    """Close the feedback loop between A and B over the coupled ports."""
    idxA = [p[0] for p in coupling.pairs]
    idxB = [p[1] for p in coupling.pairs]
    signs = np.array([p[2] for p in coupling.pairs], dtype=float)
    if any(i >= A.m or i < 0 for i in idxA):
        raise ConfigurationError(f"coupling references missing ports of '{A.name}'")
    if any(i >= B.m or i < 0 for i in idxB):
        raise ConfigurationError(f"coupling references missing ports of '{B.name}'")
    extA = [i for i in range(A.m) if i not in idxA]
    extB = [i for i in range(B.m) if i not in idxB]
    nA, nB = A.n, B.n
    n = nA + nB

    def split(x):
        x = np.asarray(x, dtype=float)
        return x[..., :nA], x[..., nA:]

    def J(x):
        xa, xb = split(x)
        JA = np.asarray(A.structure.J(xa), dtype=float)
        JB = np.asarray(B.structure.J(xb), dtype=float)
        if coupling.pairs:
            gAc = np.asarray(A.structure.g(xa), dtype=float)[..., idxA]
            gBc = np.asarray(B.structure.g(xb), dtype=float)[..., idxB]
            off = -np.einsum("...ik,k,...jk->...ij", gAc, signs, gBc)
            return _block2(JA, off, -np.swapaxes(off, -1, -2), JB)
        zAB = np.zeros(JA.shape[:-2] + (nA, nB))
        return _block2(JA, zAB, np.swapaxes(zAB, -1, -2), JB)

    def R(x):
        xa, xb = split(x)
        RA = np.asarray(A.structure.R(xa), dtype=float)
        RB = np.asarray(B.structure.R(xb), dtype=float)
        z = np.zeros(np.broadcast_shapes(RA.shape[:-2], RB.shape[:-2]) + (nA, nB))
        return _block2(RA, z, np.swapaxes(z, -1, -2), RB)

    m_ext = len(extA) + len(extB) + (2 * len(idxA) if coupling.reexport_coupled else 0)

    def g(x):
        xa, xb = split(x)
        gA = np.asarray(A.structure.g(xa), dtype=float)
        gB = np.asarray(B.structure.g(xb), dtype=float)
        batch = np.broadcast_shapes(gA.shape[:-2], gB.shape[:-2])
        out = np.zeros(batch + (n, m_ext))
        col = 0
        for i in extA:
            out[..., :nA, col] = gA[..., :, i]
            col += 1
        for i in extB:
            out[..., nA:, col] = gB[..., :, i]
            col += 1
        if coupling.reexport_coupled:
            for i in idxA:
                out[..., :nA, col] = gA[..., :, i]
                col += 1
            for i in idxB:
                out[..., nA:, col] = gB[..., :, i]
                col += 1
        return out

    kA, kB = A.k, B.k

    def xi(x):
        xa, xb = split(x)
        xiA = np.asarray(A.structure.xi(xa), dtype=float)
        xiB = np.asarray(B.structure.xi(xb), dtype=float)
        batch = np.broadcast_shapes(xiA.shape[:-2], xiB.shape[:-2])
        out = np.zeros(batch + (n, kA + kB))
        out[..., :nA, :kA] = xiA
        out[..., nA:, kA:] = xiB
        return out

    def value(x):
        xa, xb = split(x)
        return np.asarray(A.energy.value(xa)) + np.asarray(B.energy.value(xb))

    def gradient(x):
        xa, xb = split(x)
        return np.concatenate(
            [
                np.asarray(A.energy.gradient(xa), dtype=float),
                np.asarray(B.energy.gradient(xb), dtype=float),
            ],
            axis=-1,
        )

    def hessian(x):
        # only wired up when both parts carry analytic Hessians
        xa, xb = split(x)
        HA = np.asarray(A.energy.hessian(xa), dtype=float)
        HB = np.asarray(B.energy.hessian(xb), dtype=float)
        z = np.zeros(np.broadcast_shapes(HA.shape[:-2], HB.shape[:-2]) + (nA, nB))
        return _block2(HA, z, np.swapaxes(z, -1, -2), HB)

    forcing = None
    if A.forcing is not None or B.forcing is not None:

        def forcing(t, x):
            xa, xb = split(x)
            uA = np.asarray(A.forcing(t, xa), dtype=float) if A.forcing else np.zeros(A.m)
            uB = np.asarray(B.forcing(t, xb), dtype=float) if B.forcing else np.zeros(B.m)
            parts = [uA[..., extA], uB[..., extB]]
            if coupling.reexport_coupled:
                parts += [uA[..., idxA], uB[..., idxB]]
            return np.concatenate(parts, axis=-1)

    recipe = None
    if A.recipe is not None and B.recipe is not None:
        recipe = {
            "kind": "composite",
            "params": {
                "parts": [dict(A.recipe), dict(B.recipe)],
                "pairs": [list(p) for p in coupling.pairs],
                "reexport_coupled": coupling.reexport_coupled,
            },
        }

    return SPHSModel(
        n=n,
        m=m_ext,
        k=kA + kB,
        structure=StructureField(J=J, R=R, g=g, xi=xi),
        energy=EnergyFunction(
            value=value, gradient=gradient, hessian=hessian if _both_hessians(A, B) else None
        ),
        name=f"{A.name}+{B.name}",
        forcing=forcing,
        vectorized=A.vectorized and B.vectorized,
        constant_structure=A.constant_structure and B.constant_structure,
        recipe=recipe,
    )


def _both_hessians(A: SPHSModel, B: SPHSModel) -> bool:
    return A.energy.hessian is not None and B.energy.hessian is not None


def compose_many(models: Sequence[SPHSModel], couplings: Sequence = ()) -> SPHSModel:
    """Left fold of pairwise composition over a model list.

    ``couplings`` entries are (model_i, port_i, model_j, port_j, sign)
    with i < j referring to positions in ``models`` and ports numbered
    in each part's own control-port indexing.
    """
    models = list(models)
    if not models:
        raise ConfigurationError("compose_many needs at least one model")
    entries = []
    for c in couplings:
        if len(c) != 5:
            raise ConfigurationError(
                "coupling entries must be (model_i, port_i, model_j, port_j, sign)"
            )
        i, pi, j, pj, s = c
        if not (0 <= i < j < len(models)):
            raise ConfigurationError(f"coupling ({c}) must reference model_i < model_j")
        entries.append((int(i), int(pi), int(j), int(pj), int(s)))

    # port_map[orig_model][orig_port] -> current composite port (None = consumed)
    port_map = [[None] * m.m for m in models]
    for p in range(models[0].m):
        port_map[0][p] = p
    acc = models[0]
    for j in range(1, len(models)):
        B = models[j]
        pairs = []
        consumedA, consumedB = [], []
        for (i, pi, jj, pj, s) in entries:
            if jj != j:
                continue
            comp_port = port_map[i][pi]
            if comp_port is None:
                raise ConfigurationError(
                    f"port {pi} of model {i} is already coupled (double use)"
                )
            if pj >= B.m or (jj, pj) in consumedB:
                raise ConfigurationError(f"port {pj} of model {jj} unavailable")
            pairs.append((comp_port, pj, s))
            consumedA.append((i, pi))
            consumedB.append((jj, pj))
        coupling = Coupling(pairs=tuple(pairs))
        extA = [p for p in range(acc.m) if p not in [q[0] for q in pairs]]
        extB = [p for p in range(B.m) if p not in [q[1] for q in pairs]]
        acc = compose(acc, B, coupling)
        # re-derive every original model's port positions in the new composite
        old_to_new = {old: newpos for newpos, old in enumerate(extA)}
        for mi in range(j):
            port_map[mi] = [
                old_to_new.get(p) if p is not None else None for p in port_map[mi]
            ]
        for newpos, old in enumerate(extB):
            port_map[j][old] = len(extA) + newpos
        for (i, pi) in consumedA:
            port_map[i][pi] = None
        for (jj, pj) in consumedB:
            port_map[jj][pj] = None
    return acc


def composite_from_recipe(recipe: dict) -> SPHSModel:
    """Rebuild a composite model from its serialized construction record."""
    from .core import model_from_dict

    params = recipe.get("params", {})
    parts = params.get("parts")
    if not isinstance(parts, list) or len(parts) != 2:
        raise ConfigurationError("composite recipe needs exactly two parts")
    A = model_from_dict(parts[0])
    B = model_from_dict(parts[1])
    coupling = Coupling(
        pairs=tuple(tuple(p) for p in params.get("pairs", [])),
        reexport_coupled=bool(params.get("reexport_coupled", False)),
    )
    return compose(A, B, coupling)


def coupling_power_residual(model_A: SPHSModel, model_B: SPHSModel, coupling: Coupling, x) -> float:
    """|y_A^T u_A + y_B^T u_B| restricted to the coupled ports at a state.

    With u_A = -S y_B and u_B = +S y_A the transfer cancels exactly; this
    helper exposes the cancellation for tests and audits.
    """
    xa = np.asarray(x, dtype=float)[: model_A.n]
    xb = np.asarray(x, dtype=float)[model_A.n :]
    idxA = [p[0] for p in coupling.pairs]
    idxB = [p[1] for p in coupling.pairs]
    signs = np.array([p[2] for p in coupling.pairs], dtype=float)
    yA = (model_A.g(xa).T @ model_A.grad_H(xa))[idxA]
    yB = (model_B.g(xb).T @ model_B.grad_H(xb))[idxB]
    uA = -signs * yB
    uB = +signs * yA
    return float(abs(yA @ uA + yB @ uB))
