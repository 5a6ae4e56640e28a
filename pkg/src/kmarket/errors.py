"""Exception hierarchy shared by every module."""


class MarketError(Exception):
    """Base class for all protocol errors."""


# skill space
class InvalidTaxonomyError(MarketError):
    pass


class InvalidProfileError(MarketError):
    pass


class TaxonomyMismatchError(MarketError):
    pass


class DegenerateProjectError(MarketError):
    pass


class EmptyTeamError(MarketError):
    pass


# inference
class InvalidModelError(MarketError):
    pass


class UnknownAimError(MarketError):
    pass


class ImpossibleAimError(MarketError):
    pass


class InfiniteFreeEnergyError(MarketError):
    """q puts mass on a state the joint gives zero probability."""


class ConvergenceError(MarketError):
    def __init__(self, message, q=None, gap=None):
        super().__init__(message)
        self.q = q
        self.gap = gap


class NoCandidatesError(MarketError):
    pass


class InfeasiblePartitionError(MarketError):
    pass


class SearchTooLargeError(MarketError):
    pass


# ledger
class LedgerError(MarketError):
    pass


class SignatureError(LedgerError):
    pass


class ReplayError(LedgerError):
    pass


class EmptyBlockError(LedgerError):
    pass


class UnknownActorError(LedgerError):
    pass


class DecodeError(LedgerError):
    pass


# governance
class GovernanceError(MarketError):
    pass


class StateError(GovernanceError):
    pass


class MissingSectionError(GovernanceError):
    def __init__(self, section):
        super().__init__(f"missing or empty section: {section}")
        self.section = section


class UnsignedCVError(GovernanceError):
    pass


class MilestoneSumMismatchError(GovernanceError):
    pass


class EmptyElectorateError(GovernanceError):
    pass


class MissingReasonsError(GovernanceError):
    pass


class DuplicateBallotError(GovernanceError):
    pass


class QuorumError(GovernanceError):
    pass


class UnaddressedFeedbackError(GovernanceError):
    pass


class InsufficientDepositError(GovernanceError):
    def __init__(self, shortfall):
        super().__init__(f"deposit is {shortfall} below the guaranteed minimum")
        self.shortfall = shortfall


class OrderingError(GovernanceError):
    pass


class LiquidityError(GovernanceError):
    pass


class CostSheetError(GovernanceError):
    pass


# marketplace
class MarketplaceError(MarketError):
    pass


class LexiconViolationError(MarketplaceError):
    def __init__(self, tag):
        super().__init__(f"tag not in lexicon: {tag!r}")
        self.tag = tag


class EmptyPayloadError(MarketplaceError):
    pass


class IncompleteDesideratumError(MarketplaceError):
    pass


class UnsignedContractError(MarketplaceError):
    pass


class PriceOutOfBoundsError(MarketplaceError):
    pass


class ListingUnavailableError(MarketplaceError):
    pass


class InsufficientFundsError(MarketplaceError):
    pass


# simulation
class ScenarioError(MarketError):
    """Carries every validation problem found, not just the first."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class UndefinedGiniError(MarketError):
    pass
