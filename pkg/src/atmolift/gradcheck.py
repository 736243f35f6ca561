"""Finite-difference verification of reverse-mode gradients.

Every parametrized block in the package is expected to pass
:func:`grad_check` at double precision: the autograd gradient of a scalar
output is compared coordinate-by-coordinate against central finite
differences. Checks run in float64 because central differences are
unreliable in float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch

from .errors import ContractError, DivergenceError

__all__ = ["GradCheckReport", "grad_check", "module_scalar_fn"]

# FD step per coordinate: h = FD_STEP_SCALE * (|x| + 1)
FD_STEP_SCALE = 1e-5
REL_ERR_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference sweep."""

    max_rel_err: float
    worst_coordinate: tuple[str, int]
    n_checked: int
    per_tensor: dict[str, float] = field(default_factory=dict)

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def _as_f64(point: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=np.float64).copy() for k, v in point.items()}


def grad_check(
    f: Callable[[Mapping[str, np.ndarray]], float],
    point: Mapping[str, np.ndarray],
    tol: float = 1e-4,
    gradient: Callable[[Mapping[str, np.ndarray]], dict[str, np.ndarray]] | None = None,
    max_coords: int = 64,
    seed: int = 0,
) -> GradCheckReport:
    """Compare a reverse-mode gradient against central finite differences.

    ``f`` maps a dict of float64 arrays to a scalar. ``gradient`` returns the
    reverse-mode gradient at the same point; if omitted, ``f`` is assumed to
    accept torch tensors and is differentiated with autograd. When the point
    has more than ``max_coords`` coordinates, a seeded random subset of at
    least ``max_coords`` coordinates is checked.

    Raises ContractError for a non-scalar output and DivergenceError for a
    non-finite forward value.
    """
    point = _as_f64(point)
    for name, arr in point.items():
        if not np.isfinite(arr).all():
            raise ContractError(f"non-finite entries in point[{name!r}]")

    if gradient is None:
        f_torch = f

        def f_np(p: Mapping[str, np.ndarray]) -> float:
            with torch.no_grad():
                out = f_torch({k: torch.from_numpy(np.asarray(v)) for k, v in p.items()})
            return float(_scalar(out))

        def gradient(p: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
            tensors = {
                k: torch.from_numpy(np.asarray(v)).clone().requires_grad_(True)
                for k, v in p.items()
            }
            out = _scalar(f_torch(tensors))
            grads = torch.autograd.grad(out, list(tensors.values()), allow_unused=True)
            return {
                k: (g.detach().numpy() if g is not None else np.zeros_like(p[k]))
                for k, g in zip(tensors, grads)
            }

        f_eval = f_np
    else:
        f_eval = lambda p: float(f(p))  # noqa: E731

    value = f_eval(point)
    if not np.isfinite(value):
        raise DivergenceError(f"forward value is not finite: {value}")

    g_ad = gradient(point)
    missing = set(point) - set(g_ad)
    if missing:
        raise ContractError(f"gradient missing entries for {sorted(missing)}")

    coords = [(name, i) for name, arr in point.items() for i in range(arr.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in picked]

    max_rel = 0.0
    worst = coords[0]
    per_tensor: dict[str, float] = {}
    for name, idx in coords:
        flat = point[name].reshape(-1)
        x0 = flat[idx]
        h = FD_STEP_SCALE * (abs(x0) + 1.0)
        flat[idx] = x0 + h
        f_plus = f_eval(point)
        flat[idx] = x0 - h
        f_minus = f_eval(point)
        flat[idx] = x0
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise DivergenceError(f"non-finite forward value probing {name}[{idx}]")
        g_fd = (f_plus - f_minus) / (2.0 * h)
        g = float(np.asarray(g_ad[name]).reshape(-1)[idx])
        rel = abs(g - g_fd) / (abs(g_fd) + REL_ERR_FLOOR)
        per_tensor[name] = max(per_tensor.get(name, 0.0), rel)
        if rel > max_rel:
            max_rel = rel
            worst = (name, idx)

    return GradCheckReport(
        max_rel_err=max_rel,
        worst_coordinate=worst,
        n_checked=len(coords),
        per_tensor=per_tensor,
    )


def _scalar(out: torch.Tensor) -> torch.Tensor:
    if not torch.is_tensor(out):
        out = torch.as_tensor(out)
    if out.numel() != 1:
        raise ContractError(f"expected a scalar output, got shape {tuple(out.shape)}")
    return out.reshape(())


def module_scalar_fn(
    module: torch.nn.Module,
    make_output: Callable[[torch.nn.Module, dict[str, torch.Tensor]], torch.Tensor],
    inputs: Mapping[str, np.ndarray],
    probe_seed: int = 0,
) -> tuple[Callable[[Mapping[str, torch.Tensor]], torch.Tensor], dict[str, np.ndarray]]:
    """Bundle a module's parameters and inputs into one grad-checkable point.

    Returns ``(fn, point)`` where ``point`` holds every named parameter of
    ``module`` (converted in place to float64) plus the given input arrays.
    ``fn(point)`` runs ``make_output(module, inputs)`` with the module's
    parameter slots temporarily rebound to the tensors in ``point``, then
    contracts any non-scalar output against a fixed random probe vector so
    the checked function is scalar-valued.
    """
    module.double()
    point: dict[str, np.ndarray] = {
        f"param:{name}": p.detach().numpy().astype(np.float64)
        for name, p in module.named_parameters()
    }
    for k, v in inputs.items():
        point[f"input:{k}"] = np.asarray(v, dtype=np.float64)

    param_names = [name for name, _ in module.named_parameters()]
    probe_rng = np.random.default_rng(probe_seed)
    probe_cache: dict[tuple[int, ...], torch.Tensor] = {}

    def fn(p: Mapping[str, torch.Tensor]) -> torch.Tensor:
        saved = {name: _get_slot(module, name) for name in param_names}
        for name in param_names:
            src = p[f"param:{name}"]
            tensor = src if torch.is_tensor(src) else torch.from_numpy(np.asarray(src))
            _set_slot(module, name, tensor)
        try:
            ins = {
                k[len("input:"):]: (v if torch.is_tensor(v) else torch.from_numpy(np.asarray(v)))
                for k, v in p.items()
                if k.startswith("input:")
            }
            out = make_output(module, ins)
        finally:
            for name in param_names:
                _set_slot(module, name, saved[name])
        if out.numel() == 1:
            return out.reshape(())
        shape = tuple(out.shape)
        if shape not in probe_cache:
            probe_cache[shape] = torch.from_numpy(
                probe_rng.standard_normal(shape).astype(np.float64)
            )
        return (out * probe_cache[shape]).sum()

    return fn, point


def _walk(module: torch.nn.Module, dotted: str) -> tuple[torch.nn.Module, str]:
    *path, leaf = dotted.split(".")
    for part in path:
        module = getattr(module, part)
    return module, leaf


def _get_slot(module: torch.nn.Module, dotted: str) -> torch.Tensor:
    target, leaf = _walk(module, dotted)
    return target._parameters[leaf]  # type: ignore[return-value]


def _set_slot(module: torch.nn.Module, dotted: str, tensor: torch.Tensor) -> None:
    # plain tensors may replace Parameter slots so autograd flows to them
    target, leaf = _walk(module, dotted)
    target._parameters[leaf] = tensor  # type: ignore[assignment]
