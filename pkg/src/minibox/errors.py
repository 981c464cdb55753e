"""Exception hierarchy shared by every minibox module.

Each error's class name doubles as the user-facing error name printed by the
CLI (``minibox: NotFound: ...``), so names are part of the interface.
"""


class MiniboxError(Exception):
    """Base class for all domain errors."""

    @property
    def name(self) -> str:
        return type(self).__name__


# dockerfile
class DockerfileError(MiniboxError):
    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class UnknownKeyword(DockerfileError):
    pass


class MissingFrom(DockerfileError):
    pass


class MalformedArgs(DockerfileError):
    pass


class DanglingContinuation(DockerfileError):
    pass


# hostmodel
class PermissionDenied(MiniboxError):
    pass


class MissingParent(MiniboxError):
    pass


class ConflictingDiff(MiniboxError):
    pass


class FileNotFound(MiniboxError):
    pass


# imagestore
class DanglingLayer(MiniboxError):
    pass


class CorruptArchive(MiniboxError):
    pass


class NotFound(MiniboxError):
    pass


# buildengine
class BaseNotFound(MiniboxError):
    pass


class InterpreterError(MiniboxError):
    pass


class UnknownCommand(InterpreterError):
    pass


class UnknownPackage(InterpreterError):
    pass


class InteractivePromptBlocked(InterpreterError):
    pass


class CopySourceMissing(MiniboxError):
    pass


# runtime
class ImageNotFound(NotFound):
    pass


class DuplicateName(MiniboxError):
    pass


class MissingHostPath(MiniboxError):
    pass


class EntrypointMissing(MiniboxError):
    pass


class EntrypointMissingEnv(MiniboxError):
    pass


class InvalidState(MiniboxError):
    pass


class NotRunning(InvalidState):
    pass


class LogPathNotOnVolume(MiniboxError):
    pass


# netfabric
class NameInUse(DuplicateName):
    pass


class UnknownTarget(MiniboxError):
    pass


class MissingAuthSocket(MiniboxError):
    pass


class GatewayUnreachable(MiniboxError):
    pass


class ResolutionFailure(MiniboxError):
    pass


class ResponderUnknownRequest(MiniboxError):
    pass


class BindFailure(MiniboxError):
    pass


class ConnectionRefused(MiniboxError):
    pass


# orchestrate
class ParseError(MiniboxError):
    pass


class UnknownImage(ImageNotFound):
    pass


class CyclicLinks(MiniboxError):
    pass


class BadSubstitution(MiniboxError):
    pass


class UnknownService(MiniboxError):
    pass


# cli
class UnknownScenario(MiniboxError):
    pass


class StateVersionMismatch(MiniboxError):
    pass
