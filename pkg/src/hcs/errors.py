"""Exception type shared by every solver stage."""


class HcsError(Exception):
    """Raised when a solver stage cannot produce a valid result.

    ``kind`` is a short machine-readable tag (``"grazing"``, ``"singular-phi12"``,
    ...) that the CLI copies into its error JSON.
    """

    def __init__(self, kind: str, message: str = ""):
        self.kind = kind
        self.message = message or kind
        super().__init__(f"{kind}: {self.message}")

    def to_dict(self) -> dict:
        return {"error": self.kind, "message": self.message}
