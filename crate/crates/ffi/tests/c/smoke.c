/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#include <math.h>
#include <stdio.h>

#include "xconsist.h"

#define CHECK(cond)                                                   \
    do {                                                              \
        if (!(cond)) {                                                \
            fprintf(stderr, "%s:%d: %s\n", __FILE__, __LINE__, #cond); \
            return 1;                                                 \
        }                                                             \
    } while (0)

int main(int argc, char **argv) {
    uint32_t cm[] = {1, 2};
    uint32_t mono[] = {2, 1};
    double r = 0.0;
    CHECK(xc_rankc(cm, mono, 1, 2, 1, &r) == XC_STATUS_OK);
    CHECK(fabs(r - 1.0 / (1.0 + exp(1.0))) < 1e-15);
    CHECK(xc_last_error() == NULL);

    CHECK(xc_rankc(NULL, mono, 1, 2, 1, &r) == XC_STATUS_NULL);
    CHECK(xc_last_error() != NULL);

    double x[] = {1, 2, 3, 4};
    double y[] = {1, 3, 2, 4};
    double rho = 0.0, p = 0.0;
    CHECK(xc_spearman(x, y, 4, &rho, &p) == XC_STATUS_OK);
    CHECK(fabs(rho - 0.8) < 1e-12);

    XcModel *model = NULL;
    if (argc > 1) {
        size_t layers = 0;
        CHECK(xc_model_load(argv[1], &model) == XC_STATUS_OK);
        CHECK(xc_model_n_layers(model, &layers) == XC_STATUS_OK);
        CHECK(layers == 2);
        xc_model_free(model);
    }
    printf("ok %s\n", xc_version());
    return 0;
}
