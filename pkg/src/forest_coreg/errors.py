"""Exception hierarchy shared by every stage of the pipeline."""


class CoregError(Exception):
    """Base class for all pipeline errors."""


# geometry
class AngleAtCutLocus(CoregError, ValueError):
    """Rotation angle too close to pi for a unique logarithm."""


class NonPositiveResolution(CoregError, ValueError):
    pass


# ingest
class ParseError(CoregError, ValueError):
    pass


class UnsupportedProperty(UserWarning):
    """Emitted (as a warning) for PLY vertex properties that are ignored."""


class DuplicateNodeId(CoregError, ValueError):
    pass


class DanglingEdge(CoregError, ValueError):
    pass


class NonSPDInformation(CoregError, ValueError):
    pass


class EmptyMission(CoregError, ValueError):
    pass


# preprocess
class EmptyCrop(CoregError):
    """No aerial points inside the crop window; the GNSS prior is likely off."""


class DegenerateGround(CoregError):
    pass


class AntiparallelNormals(CoregError, ValueError):
    pass


# features
class FitFailed(CoregError):
    pass


# coarse registration
class GraphTooLarge(CoregError):
    pass


class InsufficientMatches(CoregError, ValueError):
    pass


class DegenerateConfiguration(CoregError, ValueError):
    pass


class MatchFailed(CoregError):
    """Too few consistent tree correspondences; the cloud is skipped."""


# fine registration
class NoCorrespondences(CoregError):
    pass


# graph optimisation
class DisconnectedGraph(CoregError):
    pass


class UnknownNode(CoregError, KeyError):
    pass


class GaugeUnconstrained(CoregError):
    """Neither a unary prior nor a fixed node anchors the graph."""


class SolverDiverged(CoregError):
    pass


# synthetic
class PackingFailed(CoregError):
    pass


class EmptyTrajectory(CoregError, ValueError):
    pass


# analysis
class NoOverlap(CoregError):
    pass
