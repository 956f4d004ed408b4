"""4-DoF pose algebra: yaw plus 3D translation.

Convention: a :class:`Pose4` is the pose of a child frame expressed in a
parent frame and maps points as ``x_parent = rz(yaw) @ x_child + trans``.
"""

import math
from operator import itemgetter

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_yaw(theta):
    """Wrap an angle into (-pi, pi]."""
    if not math.isfinite(theta):
        raise ValueError(f"non-finite angle: {theta!r}")
    r = math.remainder(theta, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


def wrap_yaw_array(theta):
    """Vectorised :func:`wrap_yaw` for numpy arrays."""
    r = np.remainder(np.asarray(theta, dtype=float) + math.pi, TWO_PI) - math.pi
    return np.where(r <= -math.pi, r + TWO_PI, r)


def rz(theta):
    """Rotation about +z by ``theta``."""
    if not math.isfinite(theta):
        raise ValueError(f"non-finite angle: {theta!r}")
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class Pose4(tuple):
    """Yaw-only rotation plus 3D translation.

    Stored as the immutable tuple ``(yaw, x, y, z)`` with ``yaw`` wrapped to
    (-pi, pi].
    """

    __slots__ = ()

    def __new__(cls, yaw=0.0, trans=(0.0, 0.0, 0.0)):
        x, y, z = (float(v) for v in trans)
        if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
            raise ValueError(f"non-finite translation: {(x, y, z)!r}")
        return tuple.__new__(cls, (wrap_yaw(float(yaw)), x, y, z))

    yaw = property(itemgetter(0))
    x = property(itemgetter(1))
    y = property(itemgetter(2))
    z = property(itemgetter(3))

    @classmethod
    def identity(cls):
        return IDENTITY

    @property
    def trans(self):
        return np.array(self[1:])

    def matrix(self):
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = rz(self[0])
        m[:3, 3] = self[1:]
        return m

    def __repr__(self):
        return f"Pose4(yaw={self[0]!r}, trans=({self[1]!r}, {self[2]!r}, {self[3]!r}))"

    def __reduce__(self):
        return (_make, tuple(self))

    def __matmul__(self, other):
        return compose(self, other)


def _make(yaw, x, y, z):
    # Trusted constructor: yaw must already be wrapped and all values finite.
    return tuple.__new__(Pose4, (yaw, x, y, z))


def _wrap(theta):
    # Hot-path wrap for sums of two already-wrapped angles.
    if theta > math.pi:
        return theta - TWO_PI
    if theta <= -math.pi:
        return theta + TWO_PI
    return theta


IDENTITY = _make(0.0, 0.0, 0.0, 0.0)


def compose(a, b):
    """Return ``a ∘ b``: frame ``b`` expressed through frame ``a``."""
    ayaw, ax, ay, az = a
    byaw, bx, by, bz = b
    c, s = math.cos(ayaw), math.sin(ayaw)
    return tuple.__new__(
        Pose4, (_wrap(ayaw + byaw), ax + c * bx - s * by, ay + s * bx + c * by, az + bz)
    )


def inverse(a):
    ayaw, ax, ay, az = a
    c, s = math.cos(ayaw), math.sin(ayaw)
    return tuple.__new__(
        Pose4, (_wrap(-ayaw), -(c * ax + s * ay), s * ax - c * ay, -az)
    )


def relative(a, b):
    """Pose of ``b``'s frame expressed in ``a``'s frame."""
    ayaw, ax, ay, az = a
    byaw, bx, by, bz = b
    c, s = math.cos(ayaw), math.sin(ayaw)
    dx, dy = bx - ax, by - ay
    return tuple.__new__(
        Pose4, (_wrap(byaw - ayaw), c * dx + s * dy, -s * dx + c * dy, bz - az)
    )


def from_matrix(m):
    """Build a Pose4 from a 4x4 homogeneous matrix with yaw-only rotation."""
    m = np.asarray(m, dtype=float)
    return Pose4(math.atan2(m[1, 0], m[0, 0]), m[:3, 3])
