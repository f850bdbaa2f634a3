"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class BandTokError(Exception):
    exit_code = 1


class InvalidInputError(BandTokError, ValueError):
    exit_code = 1


class ConfigError(BandTokError, ValueError):
    exit_code = 1


class FormatError(BandTokError):
    exit_code = 2


class VerificationError(BandTokError):
    exit_code = 3
