"""Label codebooks shared by masks, subregion volumes and reports."""

COMPARTMENT_NAMES = {1: "FC", 2: "MTC", 3: "LTC", 4: "PC"}
FC, MTC, LTC, PC = 1, 2, 3, 4

SUBREGION_NAMES = {
    1: "aMFC", 2: "ecMFC", 3: "ccMFC", 4: "icMFC", 5: "pMFC",
    6: "aLFC", 7: "ecLFC", 8: "ccLFC", 9: "icLFC", 10: "pLFC",
    11: "aMTC", 12: "eMTC", 13: "pMTC", 14: "iMTC", 15: "cMTC",
    16: "aLTC", 17: "eLTC", 18: "pLTC", 19: "iLTC", 20: "cLTC",
}
SUBREGION_CODES = {name: code for code, name in SUBREGION_NAMES.items()}

# femoral codes per side, in (anterior, exterior-central, central-central,
# interior-central, posterior) order
FEMORAL_CODES = {"medial": (1, 2, 3, 4, 5), "lateral": (6, 7, 8, 9, 10)}
# tibial codes per compartment, in (anterior, exterior, posterior, interior, central) order
TIBIAL_CODES = {MTC: (11, 12, 13, 14, 15), LTC: (16, 17, 18, 19, 20)}

# whole-compartment rows of the region statistics table
COMPARTMENT_ROWS = {21: ("FC", tuple(range(1, 11))),
                    22: ("MTC", tuple(range(11, 16))),
                    23: ("LTC", tuple(range(16, 21)))}

REGION_NAMES = {**SUBREGION_NAMES, **{c: n for c, (n, _) in COMPARTMENT_ROWS.items()}}

# compartment each subregion belongs to
SUBREGION_COMPARTMENT = {code: FC if code <= 10 else MTC if code <= 15 else LTC
                         for code in SUBREGION_NAMES}
