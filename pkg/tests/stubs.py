"""Oracle predictors for tracker tests."""

import numpy as np

from sfpp.autograd import Tensor
from sfpp.codec import BBox, grid_pixels
from sfpp.model import HeadOutput
from sfpp.synth import Dynamics, Sequence
from sfpp.tracker import TrackGeometry


class OracleStub:
    """Peaks the score map at the true target centre and emits exact
    distances to the true box (clamped to 1 px outside it)."""

    def __init__(self, gt, N=9, stride=8, offset=28.0, sigma=1.0):
        self.gt = gt
        self.sigma = sigma
        self.geometry = TrackGeometry(64, 128, stride, N, offset)
        self.templates = 0
        self.calls = []

    def template(self, patch):
        self.templates += 1
        return ("z", patch.copy())

    def heads(self, z, patch, transform=None, frame_index=0, **_):
        geo = self.geometry
        g = transform.to_patch(self.gt[frame_index])
        px = grid_pixels(geo.N, geo.stride, geo.offset)
        X, Y = np.meshgrid(px, px)
        d2 = ((X - g.cx) ** 2 + (Y - g.cy) ** 2) / (geo.stride * self.sigma) ** 2
        cls = 8.0 - d2
        dist = np.stack([X - g.x0, Y - g.y0, g.x1 - X, g.y1 - Y]).clip(1.0, None)
        self.calls.append(frame_index)
        return HeadOutput(Tensor(cls), Tensor(np.full_like(cls, 30.0)),
                          Tensor(np.log(dist / geo.stride)))


class MapStub:
    """Returns fixed logits and distances regardless of the frame."""

    def __init__(self, cls, dist, quality=None, N=9, stride=8, offset=28.0):
        self.geometry = TrackGeometry(64, 128, stride, N, offset)
        self.cls, self.dist, self.quality = cls, dist, quality

    def template(self, patch):
        return None

    def heads(self, z, patch, **_):
        q = None if self.quality is None else Tensor(self.quality)
        return HeadOutput(Tensor(self.cls), q, Tensor(np.log(self.dist / self.geometry.stride)))


def blank_sequence(boxes, size=256):
    frames = [np.full((3, size, size), 128, np.uint8) for _ in boxes]
    return Sequence(frames, list(boxes), seed=0, dynamics=Dynamics())


def moving_boxes(n, start=(60.0, 120.0), velocity=(0.0, 0.0), wh=(30.0, 24.0)):
    return [BBox.from_center(start[0] + velocity[0] * t, start[1] + velocity[1] * t, *wh) for t in range(n)]
