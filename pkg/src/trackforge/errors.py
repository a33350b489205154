"""Package-wide exception with machine-readable error codes."""


class PipelineError(Exception):
    """Error with a stable code usable by the CLI and by file readers.

    Codes used across the package: ``empty_track``, ``empty_tracks``,
    ``empty_cloud``, ``degenerate_innovation``, ``insufficient_shapes``,
    ``no_overlap``, ``no_ground_truth``, ``schema_error``, ``bad_config``.
    """

    def __init__(self, code: str, message: str = ""):
        self.code = code
        self.message = message
        super().__init__(f"{code}: {message}" if message else code)
