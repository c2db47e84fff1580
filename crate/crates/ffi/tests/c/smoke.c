#include <stdio.h>
#include <string.h>

#include "orthoprune.h"

#define CHECK(call)                                                       \
    do {                                                                  \
        OpStatus s_ = (call);                                             \
        if (s_ != OP_STATUS_OK) {                                         \
            fprintf(stderr, "%s failed: %d %s\n", #call, s_, op_last_error()); \
            return 1;                                                     \
        }                                                                 \
    } while (0)

int main(void) {
    size_t widths[2] = {4, 8};
    OpModel *model = NULL;
    OpModel *pruned = NULL;
    CHECK(op_model_new(OP_FAMILY_RESIDUAL, widths, 2, 3, 5, 7, &model));

    double images[2 * 3 * 8 * 8];
    for (size_t i = 0; i < sizeof images / sizeof images[0]; i++)
        images[i] = (double)(i % 17) / 17.0 - 0.5;
    double logits[10];
    CHECK(op_model_predict(model, images, 2, 8, 8, logits, 10));

    CHECK(op_model_prune(model, "l1", 0.5, NULL, NULL, 0, 0, 0, &pruned));
    OpCompression report;
    CHECK(op_compression_report(model, pruned, 8, 8, &report));
    if (!(report.cr > 1.0) || report.params_pruned >= report.params_original) {
        fprintf(stderr, "no compression\n");
        return 1;
    }

    if (op_model_predict(model, images, 2, 8, 8, logits, 3) != OP_STATUS_INVALID_ARGUMENT ||
        strlen(op_last_error()) == 0) {
        fprintf(stderr, "short buffer accepted\n");
        return 1;
    }

    printf("cr=%.6f eff=%.6f\n", report.cr, report.eff);
    op_model_free(pruned);
    op_model_free(model);
    return 0;
}
