"""VGG-16 allocation table at 100,000 workers (reference values).

Columns: label, activation count, parameters, load, workers, area %, nodes/worker,
pixels/worker. Blank cells are None.
"""

VGG16_ROWS = [
    ("Input", 150_528, 0, 0, None, None, None, None),
    ("Conv1", 3_211_264, 1_792, 86_704_128, 560, "0.56", 5_730, "89.53"),
    ("Conv2", 3_211_264, 36_928, 1_849_688_064, 11_956, "11.96", 269, "4.20"),
    ("MaxPool2", 802_816, 0, 0, None, None, None, None),
    ("Conv3", 1_605_632, 73_856, 924_844_032, 5_978, "5.98", 269, "2.10"),
    ("Conv4", 1_605_632, 147_584, 1_849_688_064, 11_956, "11.96", 134, "1.05"),
    ("MaxPool4", 401_408, 0, 0, None, None, None, None),
    ("Conv5", 802_816, 295_168, 924_844_032, 5_978, "5.98", 134, "0.52"),
    ("Conv6", 802_816, 590_080, 1_849_688_064, 11_956, "11.96", 67, "0.26"),
    ("Conv7", 802_816, 590_080, 1_849_688_064, 11_956, "11.96", 67, "0.26"),
    ("MaxPool7", 200_704, 0, 0, None, None, None, None),
    ("Conv8", 401_408, 1_180_160, 924_844_032, 5_978, "5.98", 67, "0.13"),
    ("Conv9", 401_408, 2_359_808, 1_849_688_064, 11_956, "11.96", 34, "0.07"),
    ("Conv10", 401_408, 2_359_808, 1_849_688_064, 11_956, "11.96", 34, "0.07"),
    ("MaxPool10", 100_352, 0, 0, None, None, None, None),
    ("Conv11", 100_352, 2_359_808, 462_422_016, 2_989, "2.99", 34, "0.07"),
    ("Conv12", 100_352, 2_359_808, 462_422_016, 2_989, "2.99", 34, "0.07"),
    ("Conv13", 100_352, 2_359_296, 462_422_016, 2_989, "2.99", 34, "0.07"),
    ("MaxPool13", 25_088, 0, 0, None, None, None, None),
    ("FC14", 4_096, 102_760_449, 102_760_448, 664, "0.66", 6, "6.17"),
    ("FC15", 4_096, 16_777_217, 16_777_216, 108, "0.11", 38, "37.77"),
    ("Out", 1_000, 4_096_001, 4_096_000, 26, "0.03", 38, "37.77"),
]

TOTAL_ACTIVATIONS = 15_237_608
TOTAL_LOAD = 15_470_264_320
TOTAL_WORKERS = 100_000
# the one cell where the table drops the bias term
CONV13_PARAMS = {2_359_296, 2_359_808}
