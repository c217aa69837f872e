"""Exception hierarchy.

Every error raised on bad input derives from :class:`SmtpFlowError` (and
``ValueError``), so callers fuzzing decoders or parsers can catch one type.
"""


class SmtpFlowError(ValueError):
    pass


class InvalidFlow(SmtpFlowError):
    def __init__(self, field, reason):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


class InvalidThresholds(SmtpFlowError):
    pass


# netflow codec / CSV

class NetflowError(SmtpFlowError):
    pass


class TruncatedPacket(NetflowError):
    pass


class BadVersion(NetflowError):
    def __init__(self, version):
        super().__init__(f"unsupported NetFlow version {version}")
        self.version = version


class CountMismatch(NetflowError):
    pass


class TooManyRecords(NetflowError):
    pass


class FieldOverflow(NetflowError):
    def __init__(self, field, value=None):
        super().__init__(f"{field} out of range: {value!r}")
        self.field = field
        self.value = value


class MissingHeader(SmtpFlowError):
    pass


class MalformedRow(SmtpFlowError):
    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


# classifier

class EmptySample(SmtpFlowError):
    pass


class InsufficientClassSamples(SmtpFlowError):
    def __init__(self, cls, n=0, required=0):
        super().__init__(f"{cls.name}: {n} samples, need {required}")
        self.cls = cls


# log correlation

class MalformedLogLine(SmtpFlowError):
    def __init__(self, line, reason="unparseable"):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class EmptyLog(SmtpFlowError):
    pass


class EmptyInput(SmtpFlowError):
    pass


# lists

class MalformedEntry(SmtpFlowError):
    def __init__(self, line, text=""):
        super().__init__(f"line {line}: bad list entry {text!r}")
        self.line = line


# aggregate

class ServerMismatch(SmtpFlowError):
    pass


class NoJudgedFlows(SmtpFlowError):
    pass


class NoRejectedFlows(SmtpFlowError):
    pass


class FlowBeforeOrigin(SmtpFlowError):
    pass


class SeriesTooShort(SmtpFlowError):
    pass


class IncompatibleBuckets(SmtpFlowError):
    pass


# synth

class InvalidConfig(SmtpFlowError):
    def __init__(self, field, reason=""):
        super().__init__(f"{field}: {reason}" if reason else field)
        self.field = field
