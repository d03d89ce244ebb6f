import typing

__all__ = [
    'CheckpointError',
    'DegenerateLabels',
    'DetachedTensor',
    'NumericFault',
    'OutputValidationError',
    'SceneValidationError',
    'SemlocError',
    'ShapeMismatch',
    'TrainingDiverged',
    'with_context',
]

TException = typing.TypeVar('TException', bound=Exception)


def with_context(
        exc: TException,
        context: typing.Mapping[typing.Text, typing.Any],
) -> TException:
    """
    Attaches a context dict to an exception, so that it can be captured by
    loggers.

    This lets you keep the exception message fairly short/generic, while making
    useful troubleshooting information (offending node ids, tensor shapes,
    file positions) accessible to debuggers and loggers.

    Example:

    .. code-block:: python

       raise with_context(
         SceneValidationError('Visibility edge references a missing object.'),

         context = {
            'edge': [place_id, object_id],
            'objectId': object_id,
         },
       )
    """
    if not hasattr(exc, 'context'):
        exc.context = {}

    if not isinstance(exc.context, typing.MutableMapping):
        exc.context = {'_context': exc.context}

    exc.context.update(context)

    return exc


class SemlocError(Exception):
    """
    Base class for errors raised by semloc.
    """
    context: typing.Dict[typing.Text, typing.Any]


class ShapeMismatch(SemlocError, ValueError):
    """
    Inputs to a tensor primitive do not conform to its signature.
    """


class NumericFault(SemlocError, ArithmeticError):
    """
    A tensor primitive produced a non-finite value.
    """


class DetachedTensor(SemlocError, ValueError):
    """
    A gradient was requested for a tensor that is not recorded on the tape.
    """


class SceneValidationError(SemlocError, ValueError):
    """
    A scene graph failed schema or invariant validation.
    """


class DegenerateLabels(SemlocError, ValueError):
    """
    A metric was asked to score labels that lack positives or negatives.
    """


class TrainingDiverged(SemlocError, RuntimeError):
    """
    The training loss became non-finite.
    """


class CheckpointError(SemlocError, ValueError):
    """
    A parameter checkpoint does not match the expected format.
    """


class OutputValidationError(SemlocError, ValueError):
    """
    A command's output bundle does not match its manifest or the expected
    file formats.
    """
