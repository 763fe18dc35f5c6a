from .imageio import save_png, save_views_png
from .renderers import (LatentImageRenderer, RenderError, Renderer, VoxelRenderer, grid_vjp, make_renderer,
                        render, render_grid)
from .scene import SceneParameters, Slot, load_scene, make_layout, save_scene

__all__ = [
    "LatentImageRenderer", "RenderError", "Renderer", "SceneParameters", "Slot", "VoxelRenderer",
    "grid_vjp", "load_scene", "make_layout", "make_renderer", "render", "render_grid", "save_png",
    "save_scene", "save_views_png",
]
