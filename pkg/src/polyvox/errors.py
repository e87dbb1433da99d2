"""Shared exception types."""


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


class WavFormatError(ValueError):
    """Malformed RIFF/WAVE structure."""


class UnsupportedWavError(ValueError):
    """Structurally valid WAV that uses a codec we do not read."""


class MidiParseError(ValueError):
    """Malformed or truncated Standard MIDI File."""
