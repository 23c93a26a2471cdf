"""Exception types shared across the package."""


class MalformedBitstreamError(ValueError):
    """A bitstream could not be parsed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class CheckpointError(RuntimeError):
    """Checkpoint is missing groups, has the wrong version, or mismatches the config."""
