"""Exception hierarchy shared by every layer of the package."""


class DwptError(Exception):
    """Base class for all errors raised by dwpt_auth."""


class ParameterError(DwptError, ValueError):
    """An argument is outside the domain an operation accepts."""


class ConfigError(DwptError):
    """A scenario or topology description is malformed."""


class DecodeError(DwptError):
    """Wire bytes do not match the expected layout."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class EnvelopeAuthError(DwptError):
    """Authenticated decryption failed (wrong key or modified ciphertext)."""


# Protocol-level rejections. Every one of these is a refusal by an honest
# entity, so simulations treat them as verdicts rather than crashes.


class ProtocolError(DwptError):
    """A message arrived that the receiving entity cannot act on."""


class FreshnessError(ProtocolError):
    """Timestamp outside the freshness window, or a nonce seen twice."""


class DuplicateError(ProtocolError):
    pass


class RegistrationError(ProtocolError):
    pass


class UnknownPseudonymError(ProtocolError):
    pass


class AuthError(ProtocolError):
    """A mac comparison failed."""


class DoubleSpendError(ProtocolError):
    """A token, ticket or pseudonym was presented after it was used up."""


class AdmissionError(ProtocolError):
    pass


class ChainExhaustedError(ProtocolError):
    pass


class ChainRejected(ProtocolError):
    """A charging pad refused a hash-chain value."""


class AnchorLookupError(ProtocolError, LookupError):
    pass


class BillingError(ProtocolError):
    pass


class SettlementError(ProtocolError):
    pass
