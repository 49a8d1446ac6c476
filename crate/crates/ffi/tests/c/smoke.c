#include <stdio.h>
#include <string.h>
#include "stts.h"

int main(void) {
    float scores[4] = {0.1f, 0.9f, 0.3f, 0.7f};
    size_t idx[2];
    if (stts_hard_topk(scores, 4, 2, idx) != STTS_STATUS_OK || idx[0] != 1 || idx[1] != 3) return 1;

    SttsAnchorGrid *grid = NULL;
    size_t count = 0;
    if (stts_anchor_grid_new(3, 3, 2, 1, &grid) != STTS_STATUS_OK) return 2;
    if (stts_anchor_grid_count(grid, &count) != STTS_STATUS_OK || count != 4) return 3;
    stts_anchor_grid_free(grid);

    SttsSelection sel;
    if (stts_parse_selection("tiny-T0_0.4-S2_0.6", &sel) != STTS_STATUS_OK) return 4;
    if (!sel.has_temporal || sel.spatial_layer != 2) return 5;
    if (stts_parse_selection("tiny-S2_0.6-T0_0.4", &sel) != STTS_STATUS_PARSE) return 6;
    char msg[256];
    if (stts_last_error_message(msg, sizeof msg) == 0 || strstr(msg, "parse") == NULL) return 7;

    uint64_t total = 0, base = 0;
    if (stts_count_flops("tiny", &total, &base) != STTS_STATUS_OK || total != base) return 8;
    printf("ok\n");
    return 0;
}
