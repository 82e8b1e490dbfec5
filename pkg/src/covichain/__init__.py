"""Anonymous vaccination records keyed by iris Simhash and personal info on a PoA ledger."""

from .identity import Gender, PersonalInfo, UserId, canonical_preimage, derive_id
from .lsh import LshParams, MatchSet, ScanHash, find_candidates, hash_distance, simhash
from .templates import FeatureVector, MaskVector, PopulationSpec, generate_population

__all__ = [
    "FeatureVector",
    "Gender",
    "LshParams",
    "MaskVector",
    "MatchSet",
    "PersonalInfo",
    "PopulationSpec",
    "ScanHash",
    "UserId",
    "canonical_preimage",
    "derive_id",
    "find_candidates",
    "generate_population",
    "hash_distance",
    "simhash",
]
