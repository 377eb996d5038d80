"""Exception types raised across the package."""


class DegenerateShape(ValueError):
    """A shape has too few, collinear or coincident landmarks."""


class DegenerateAnchors(ValueError):
    """Anchor landmarks used for initialization are collinear or repeated."""


class NonDiffeomorphicUpdate(RuntimeError):
    """A warp composition folded the mesh (a triangle flipped orientation)."""


class TrackingLost(RuntimeError):
    """Too much of the template falls outside the image to continue fitting.

    The fitting state reached before the failure is attached as ``state``
    (may be ``None`` when the failure happens before the first residual).
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
