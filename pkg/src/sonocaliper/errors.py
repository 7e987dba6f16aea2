"""Exception hierarchy shared across the toolkit."""


class SonoCaliperError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(SonoCaliperError):
    """An argument violated a documented precondition (non-finite value, bad range, ...)."""


class IncompleteLandmarkSetError(SonoCaliperError):
    """A landmark set does not carry exactly the calipers its plane requires."""

    def __init__(self, plane_name, missing=(), unexpected=()):
        self.plane_name = plane_name
        self.missing = tuple(missing)
        self.unexpected = tuple(unexpected)
        parts = [f"landmark set for plane {plane_name!r} is invalid"]
        if self.missing:
            parts.append("missing: " + ", ".join(self.missing))
        if self.unexpected:
            parts.append("unexpected: " + ", ".join(self.unexpected))
        super().__init__("; ".join(parts))


class LandmarkOutOfBoundsError(SonoCaliperError):
    """A landmark lies outside the image it is being encoded on."""

    def __init__(self, name, point, width, height):
        self.name = name
        self.point = point
        super().__init__(
            f"landmark {name!r} at ({point.x:.3f}, {point.y:.3f}) is outside the "
            f"{width}x{height} image"
        )


class DegenerateChannelError(SonoCaliperError):
    """A predicted channel is constant and carries no landmark evidence."""


class ConfigurationError(SonoCaliperError):
    """Mismatched shapes, planes or settings between components."""


class TrainingDivergedError(SonoCaliperError):
    """Non-finite values appeared in the network outputs during training."""


class InvalidPhantomSpecError(SonoCaliperError):
    """A phantom spec would place landmarks outside the safe canvas margin."""


class ManifestError(SonoCaliperError):
    """The manifest container itself is malformed (unreadable, bad schema, ...)."""


class UndefinedICCError(SonoCaliperError):
    """The rating table has no variance to apportion; ICC is undefined."""


class CheckpointError(SonoCaliperError):
    """A checkpoint file is missing, truncated or not in the documented format."""


class StudyNotFoundError(SonoCaliperError):
    """The review store holds no study under the requested id."""


class StoreConflictError(SonoCaliperError):
    """A write carried a stale revision; the study changed since it was read."""

    def __init__(self, study_id, expected, actual):
        self.study_id = study_id
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"study {study_id!r} is at revision {actual}, write was based on {expected}"
        )
