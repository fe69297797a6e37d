"""Stable method identifiers used as score-table columns and config keys."""

CONFIDENCE_METHODS = (
    "mcp", "se", "mls", "energy", "mcdp_mcp", "mcdp_pe", "mcdp_mi", "de_mcp", "gradnorm", "odin", "react", "dice",
)
FEATURE_METHODS = ("mahalanobis", "mbm", "rms", "gram")
ALL_METHODS = CONFIDENCE_METHODS + FEATURE_METHODS
# hyperparameters of these are grid-searched on OOD data
TUNED_METHODS = ("odin", "react", "dice")

DISPLAY_NAMES = {
    "mcp": "MCP",
    "se": "SE",
    "mls": "MLS",
    "energy": "Energy Score",
    "mcdp_mcp": "MCDP-MCP",
    "mcdp_pe": "MCDP-PE",
    "mcdp_mi": "MCDP-MI",
    "de_mcp": "DE-MCP",
    "gradnorm": "GradNorm",
    "odin": "ODIN*",
    "react": "ReAct*",
    "dice": "DICE*",
    "mahalanobis": "Mahal. Score",
    "mbm": "MBM",
    "rms": "RMS",
    "gram": "GRAM",
}
