"""Deterministic z-buffer triangle rasteriser.

Geometry is rasterised in the camera frame; depth is the camera-frame z of
the surface (not distance along the ray).  Pixel (row r, col c) is sampled
at its centre (u, v) = (c, r).  A triangle owns a pixel iff the centre lies
strictly inside, or on an edge covered by the top-left fill rule, so two
triangles sharing an edge never both claim a pixel.  There is no
anti-aliasing and no back-face culling; triangles with any vertex at
z <= NEAR_EPS are skipped rather than clipped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fragments import MeshModel
from .geometry import CameraIntrinsics, Pose

NEAR_EPS = 1e-9
NO_DEPTH = 0.0  # sentinel for pixels without surface


@dataclass
class DepthMap:
    """Per-pixel camera-frame depth in mm; NO_DEPTH marks empty pixels."""

    values: np.ndarray  # (H, W) float64

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def covered(self) -> np.ndarray:
        return self.values > NO_DEPTH


@dataclass
class IndexMaps:
    """Per-pixel identity of the rasterised surface.

    object_id is 0 on background; triangle and instance are -1 there.
    points holds the exact model-frame surface point for covered pixels
    (barycentric interpolation of the triangle's vertices).
    """

    object_id: np.ndarray  # (H, W) int32
    instance: np.ndarray  # (H, W) int32, index into the scene's instance list
    triangle: np.ndarray  # (H, W) int32
    points: np.ndarray  # (H, W, 3) float64, model frame


def _rasterise_mesh(zbuf, obj_map, inst_map, tri_map, pts_map,
                    cam_pts, model_pts, triangles, camera,
                    object_id, instance_index, want_indices):
    """Rasterise one transformed mesh into the shared buffers."""
    height, width = zbuf.shape
    zs = cam_pts[:, 2]
    uv = np.empty((len(cam_pts), 2))
    ok = zs > NEAR_EPS
    uv[ok, 0] = camera.fx * cam_pts[ok, 0] / zs[ok] + camera.cx
    uv[ok, 1] = camera.fy * cam_pts[ok, 1] / zs[ok] + camera.cy
    # coverage is decided on a 1/256 subpixel grid: edge functions on
    # snapped endpoints are exact in double precision, so pixel centres on
    # a shared edge hit the w == 0 ownership rule instead of cracking
    # between the two triangles; interpolation still uses the exact
    # projections to keep index maps accurate well below a pixel
    uv_exact = uv.copy()
    uv[ok] = np.round(uv[ok] * 256.0) / 256.0

    for t_idx in range(len(triangles)):
        ia, ib, ic = triangles[t_idx]
        if not (ok[ia] and ok[ib] and ok[ic]):
            continue
        pa, pb, pc = uv[ia], uv[ib], uv[ic]
        area2 = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0])
        if area2 == 0.0:
            continue
        if area2 < 0.0:  # flip winding so edge functions are >= 0 inside
            pb, pc = pc, pb
            ib, ic = ic, ib
            area2 = -area2

        x0 = max(0, int(np.ceil(min(pa[0], pb[0], pc[0]))))
        x1 = min(width - 1, int(np.floor(max(pa[0], pb[0], pc[0]))))
        y0 = max(0, int(np.ceil(min(pa[1], pb[1], pc[1]))))
        y1 = min(height - 1, int(np.floor(max(pa[1], pb[1], pc[1]))))
        if x0 > x1 or y0 > y1:
            continue

        px, py = np.meshgrid(np.arange(x0, x1 + 1, dtype=np.float64),
                             np.arange(y0, y1 + 1, dtype=np.float64))
        # edge functions, positive inside for the fixed winding
        w0 = (pc[0] - pb[0]) * (py - pb[1]) - (pc[1] - pb[1]) * (px - pb[0])
        w1 = (pa[0] - pc[0]) * (py - pc[1]) - (pa[1] - pc[1]) * (px - pc[0])
        w2 = (pb[0] - pa[0]) * (py - pa[1]) - (pb[1] - pa[1]) * (px - pa[0])

        # top-left ownership for pixel centres exactly on an edge: with the
        # positive-inside winding fixed above, left edges point up (dy < 0)
        # and top edges point right (dy == 0, dx > 0)
        def owns(edge_from, edge_to):
            dx = edge_to[0] - edge_from[0]
            dy = edge_to[1] - edge_from[1]
            return dy < 0.0 or (dy == 0.0 and dx > 0.0)

        inside = (
            ((w0 > 0.0) | ((w0 == 0.0) & owns(pb, pc)))
            & ((w1 > 0.0) | ((w1 == 0.0) & owns(pc, pa)))
            & ((w2 > 0.0) | ((w2 == 0.0) & owns(pa, pb)))
        )
        if not inside.any():
            continue

        qa, qb, qc = uv_exact[ia], uv_exact[ib], uv_exact[ic]
        area2u = (qb[0] - qa[0]) * (qc[1] - qa[1]) - (qb[1] - qa[1]) * (qc[0] - qa[0])
        if abs(area2u) > 1e-9:
            u0 = (qc[0] - qb[0]) * (py - qb[1]) - (qc[1] - qb[1]) * (px - qb[0])
            u1 = (qa[0] - qc[0]) * (py - qc[1]) - (qa[1] - qc[1]) * (px - qc[0])
            u2 = (qb[0] - qa[0]) * (py - qa[1]) - (qb[1] - qa[1]) * (px - qa[0])
            l0 = u0[inside] / area2u
            l1 = u1[inside] / area2u
            l2 = u2[inside] / area2u
        else:  # sliver thinner than the snap grid: snapped weights suffice
            l0 = w0[inside] / area2
            l1 = w1[inside] / area2
            l2 = w2[inside] / area2
        # perspective-correct: 1/z interpolates linearly in screen space
        inv_z = l0 / zs[ia] + l1 / zs[ib] + l2 / zs[ic]
        depth = 1.0 / inv_z

        rows = py[inside].astype(np.intp)
        cols = px[inside].astype(np.intp)
        current = zbuf[rows, cols]
        closer = (current == NO_DEPTH) | (depth < current)
        if not closer.any():
            continue
        rows, cols, depth = rows[closer], cols[closer], depth[closer]
        zbuf[rows, cols] = depth
        if want_indices:
            l0, l1, l2 = l0[closer], l1[closer], l2[closer]
            va, vb, vc = model_pts[ia], model_pts[ib], model_pts[ic]
            surf = (
                (l0 / zs[ia])[:, None] * va
                + (l1 / zs[ib])[:, None] * vb
                + (l2 / zs[ic])[:, None] * vc
            ) * depth[:, None]
            obj_map[rows, cols] = object_id
            inst_map[rows, cols] = instance_index
            tri_map[rows, cols] = t_idx
            pts_map[rows, cols] = surf


def render_scene(instances, camera: CameraIntrinsics, want_indices: bool = True):
    """Render a list of (MeshModel, Pose) into depth and identity maps.

    Later instances never overwrite nearer surfaces: the z-buffer keeps the
    smallest depth per pixel regardless of draw order.

    Returns:
        (DepthMap, IndexMaps); IndexMaps is None when want_indices is False.
    """
    h, w = camera.height, camera.width
    zbuf = np.full((h, w), NO_DEPTH)
    if want_indices:
        obj_map = np.zeros((h, w), dtype=np.int32)
        inst_map = np.full((h, w), -1, dtype=np.int32)
        tri_map = np.full((h, w), -1, dtype=np.int32)
        pts_map = np.zeros((h, w, 3))
    else:
        obj_map = inst_map = tri_map = pts_map = None

    for inst_idx, (model, pose) in enumerate(instances):
        cam_pts = pose.transform(model.vertices)
        _rasterise_mesh(zbuf, obj_map, inst_map, tri_map, pts_map,
                        cam_pts, model.vertices, model.triangles, camera,
                        model.object_id, inst_idx, want_indices)

    depth = DepthMap(values=zbuf)
    if not want_indices:
        return depth, None
    return depth, IndexMaps(object_id=obj_map, instance=inst_map,
                            triangle=tri_map, points=pts_map)


def render_depth(model: MeshModel, pose: Pose, camera: CameraIntrinsics) -> DepthMap:
    """Depth map of a single instance."""
    depth, _ = render_scene([(model, pose)], camera, want_indices=False)
    return depth


def visibility_mask(model_depth: DepthMap, scene_depth: DepthMap,
                    tolerance_mm: float = 15.0) -> np.ndarray:
    """Pixels where the model surface is visible against the scene.

    A pixel is visible iff the model has surface there and its depth is at
    most the scene depth plus tolerance; pixels where the scene has no
    depth reading are treated as unoccluded.
    """
    model_vals = model_depth.values
    scene_vals = scene_depth.values
    if model_vals.shape != scene_vals.shape:
        from .errors import DimensionMismatchError

        raise DimensionMismatchError("depth maps must share a shape")
    scene_far = np.where(scene_vals > NO_DEPTH, scene_vals, np.inf)
    return (model_vals > NO_DEPTH) & (model_vals <= scene_far + tolerance_mm)
