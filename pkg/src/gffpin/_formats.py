"""Format-version handling shared by every on-disk schema."""

from . import FORMAT_VERSION


class FormatVersionError(ValueError):
    """Raised when a file carries a format version we cannot read."""


def check_format_version(version):
    """Accept any minor revision of the supported major version."""
    if version is None:
        raise FormatVersionError("missing format_version")
    major = str(version).split(".")[0]
    if major != FORMAT_VERSION.split(".")[0]:
        raise FormatVersionError(
            f"unsupported format_version {version!r} (expected major {FORMAT_VERSION.split('.')[0]})"
        )
    return str(version)
