"""Report figures (PNG) for the command-line products.

Figures are drawn with matplotlib's object API on an Agg canvas, so nothing
touches global pyplot state, and PNG metadata is stripped so re-running a
command gives identical bytes.
"""

from __future__ import annotations

import io

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .io import atomic_write_bytes

DPI = 100
_PNG_META = {"Software": None}


def new_figure(ncols: int = 1, nrows: int = 1, size=(4.0, 3.4)):
    fig = Figure(figsize=(size[0] * ncols, size[1] * nrows), dpi=DPI)
    FigureCanvasAgg(fig)
    axes = fig.subplots(nrows, ncols, squeeze=False)
    return fig, axes


def save_figure(fig: Figure, path) -> None:
    buf = io.BytesIO()
    fig.tight_layout()
    fig.savefig(buf, format="png", dpi=DPI, metadata=_PNG_META)
    atomic_write_bytes(path, buf.getvalue())


def _extent(shape, pitch_um):
    h, w = shape
    return [-(w // 2 + 0.5) * pitch_um, (w - w // 2 - 0.5) * pitch_um,
            -(h // 2 + 0.5) * pitch_um, (h - h // 2 - 0.5) * pitch_um]


def _show(ax, image, title, pitch_um=None, cmap="gray", extent=None, label="um"):
    if extent is None and pitch_um is not None:
        extent = _extent(np.shape(image), pitch_um)
    im = ax.imshow(image, origin="lower", cmap=cmap, extent=extent, interpolation="nearest")
    ax.set_title(title, fontsize=9)
    ax.set_xlabel(f"x ({label})")
    ax.set_ylabel(f"y ({label})")
    return im


def plot_events(events, path, width: int = 256, height: int = 256) -> None:
    """Per-camera detection-count images."""
    cams = sorted(set(int(c) for c in np.unique(events["cam"]))) or [0]
    fig, axes = new_figure(len(cams))
    for ax, cam in zip(axes[0], cams):
        sel = events[events["cam"] == cam]
        img = np.histogram2d(sel["y_px"], sel["x_px"], bins=(height, width),
                             range=((-0.5, height - 0.5), (-0.5, width - 0.5)))[0]
        im = _show(ax, img, f"camera {cam}: {len(sel)} events", extent=[-0.5, width - 0.5, -0.5, height - 0.5],
                   cmap="magma", label="px")
        fig.colorbar(im, ax=ax, shrink=0.8)
    save_figure(fig, path)


def plot_reconstruction(shifted, retrieval, path) -> None:
    """Shifted-sum amplitude, retrieved amplitude and the residual trace."""
    fig, axes = new_figure(3)
    p = shifted.grid.pitch_um
    _show(axes[0, 0], shifted.amplitude, f"ray-traced amplitude, z = {shifted.z_um:g} um", p)
    _show(axes[0, 1], retrieval.amplitude, f"retrieved amplitude ({retrieval.iterations} loops)", p)
    ax = axes[0, 2]
    ax.plot(np.arange(1, retrieval.iterations + 1), retrieval.errors, "o-", ms=3)
    if np.all(retrieval.errors > 0):
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("residual")
    ax.set_title("diffraction-plane residual", fontsize=9)
    save_figure(fig, path)


def plot_stack(stack, total, path, max_slices: int = 7) -> None:
    """A row of slices (evenly subsampled) plus the all-in-focus sum."""
    n = len(stack)
    idx = np.unique(np.round(np.linspace(0, n - 1, min(n, max_slices))).astype(int))
    fig, axes = new_figure(len(idx) + 1, size=(2.6, 2.6))
    p = stack.grid.pitch_um
    for ax, i in zip(axes[0], idx):
        _show(ax, stack.slices[i], f"z = {stack.z_um[i]:g} um", p)
    _show(axes[0, -1], total, "all in focus", p)
    save_figure(fig, path)


def plot_depth(dmap, total, pitch_um, path, z_range=None) -> None:
    fig, axes = new_figure(2)
    _show(axes[0, 0], total, "all in focus", pitch_um)
    d = np.ma.masked_invalid(dmap.depth_um)
    extent = _extent(d.shape, pitch_um)
    vmin, vmax = z_range if z_range is not None else (None, None)
    im = axes[0, 1].imshow(d, origin="lower", cmap="jet", extent=extent, interpolation="nearest",
                           vmin=vmin, vmax=vmax)
    axes[0, 1].set_facecolor("black")
    axes[0, 1].set_title("depth map", fontsize=9)
    fig.colorbar(im, ax=axes[0, 1], shrink=0.8, label="z (um)")
    save_figure(fig, path)


def plot_momentum(hist, fits, path) -> None:
    """Joint ``k1x``/``k2x`` histogram and the sum-coordinate profiles with their fits."""
    from .coincidence import gaussian

    fig, axes = new_figure(2)
    e = hist.edges
    _show(axes[0, 0], hist.joint_x.T, "joint distribution (x)", extent=[e[0], e[-1], e[0], e[-1]],
          cmap="magma", label="1/um")
    axes[0, 0].set_xlabel("k1x (1/um)")
    axes[0, 0].set_ylabel("k2x (1/um)")
    ax = axes[0, 1]
    k = hist.sum_centers
    fine = np.linspace(k[0], k[-1], 400)
    for (name, profile), fit, colour in zip(fits["profiles"].items(), fits["fits"], ("C0", "C1")):
        ax.plot(k, profile, "o", ms=3, color=colour, label=f"{name}")
        if fit is not None:
            ax.plot(fine, gaussian(fine, fit.a, fit.b, fit.sigma), "-", color=colour,
                    label=f"sigma = {fit.sigma:.3g} 1/um")
    ax.set_xlabel("k1 + k2 (1/um)")
    ax.set_ylabel("coincidences")
    ax.set_title("sum-coordinate projection", fontsize=9)
    ax.legend(fontsize=7)
    save_figure(fig, path)


def plot_dof(curve, path, conventional=None) -> None:
    fig, axes = new_figure(1, size=(5.0, 3.6))
    ax = axes[0, 0]
    y = np.where(np.isfinite(curve.smallest_um), curve.smallest_um, np.nan)
    ax.plot(curve.z_um, y, "o-", label="smallest resolved spacing")
    if len(curve.z_um) >= 3:
        med = curve.median_filtered()
        ax.plot(curve.z_um, np.where(med < 1e11, med, np.nan), "--", label="median filtered")
    unresolved = ~np.isfinite(curve.smallest_um)
    if unresolved.any():
        top = np.nanmax(y) if np.isfinite(y).any() else 1.0
        ax.plot(curve.z_um[unresolved], np.full(unresolved.sum(), top), "rx", label="nothing resolved")
    if conventional is not None:
        ax.axvspan(-conventional / 2, conventional / 2, color="0.85", label="conventional DOF")
    ax.set_xlabel("z (um)")
    ax.set_ylabel("line spacing (um)")
    ax.legend(fontsize=7)
    save_figure(fig, path)


def plot_ghost(image, edges, path) -> None:
    fig, axes = new_figure(1, size=(4.6, 3.8))
    im = _show(axes[0, 0], image, "coincidences in idler coordinates", extent=[edges[0], edges[-1], edges[0], edges[-1]],
               cmap="gray", label="1/um")
    axes[0, 0].set_xlabel("kx (1/um)")
    axes[0, 0].set_ylabel("ky (1/um)")
    fig.colorbar(im, ax=axes[0, 0], shrink=0.8)
    save_figure(fig, path)
